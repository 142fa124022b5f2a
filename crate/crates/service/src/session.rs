//! In-memory sessions for clients that iterate on one composite: upload it
//! once, then post only masks. Sessions idle longer than the timeout are
//! dropped on the next store access.

use std::collections::HashMap;
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use iharmon_core::{Image, Mask};
use rand::Rng;

#[derive(Debug, Clone)]
pub struct SessionRecord {
    pub id: String,
    pub composite: Arc<Image>,
    pub fg_mask: Option<Arc<Mask>>,
    pub guide_mask: Option<Arc<Mask>>,
    /// PNG bytes of the most recent result computed in this session.
    pub last_result: Option<Arc<Vec<u8>>>,
    pub created: Instant,
    pub last_used: Instant,
}

#[derive(Debug, Clone)]
pub struct SessionStore {
    idle_timeout: Duration,
    inner: Arc<Mutex<HashMap<String, SessionRecord>>>,
}

fn new_id() -> String {
    let bytes: [u8; 16] = rand::rng().random();
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

impl SessionStore {
    pub fn new(idle_timeout: Duration) -> Self {
        Self {
            idle_timeout,
            inner: Arc::default(),
        }
    }

    fn lock(&self) -> std::sync::MutexGuard<'_, HashMap<String, SessionRecord>> {
        // A panic while holding the lock cannot leave a record half-written.
        self.inner.lock().unwrap_or_else(|e| e.into_inner())
    }

    /// Drops every session idle since before `now - idle_timeout`.
    pub fn expire(&self, now: Instant) -> usize {
        let mut map = self.lock();
        let before = map.len();
        map.retain(|_, s| now.saturating_duration_since(s.last_used) < self.idle_timeout);
        before - map.len()
    }

    pub fn create(&self, composite: Image) -> SessionRecord {
        let now = Instant::now();
        self.expire(now);
        let record = SessionRecord {
            id: new_id(),
            composite: Arc::new(composite),
            fg_mask: None,
            guide_mask: None,
            last_result: None,
            created: now,
            last_used: now,
        };
        self.lock().insert(record.id.clone(), record.clone());
        record
    }

    /// Returns the session and marks it used.
    pub fn touch(&self, id: &str) -> Option<SessionRecord> {
        let now = Instant::now();
        self.expire(now);
        let mut map = self.lock();
        let s = map.get_mut(id)?;
        s.last_used = now;
        Some(s.clone())
    }

    /// Applies `f` to the stored record, if it still exists.
    pub fn update(&self, id: &str, f: impl FnOnce(&mut SessionRecord)) -> bool {
        match self.lock().get_mut(id) {
            Some(s) => {
                f(s);
                s.last_used = Instant::now();
                true
            }
            None => false,
        }
    }

    pub fn remove(&self, id: &str) -> bool {
        self.lock().remove(id).is_some()
    }

    pub fn len(&self) -> usize {
        self.lock().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn img() -> Image {
        Image::from_fn(2, 2, 3, |_, _, _| 0.5).unwrap()
    }

    #[test]
    fn idle_sessions_expire() {
        let store = SessionStore::new(Duration::from_secs(60));
        let a = store.create(img());
        let b = store.create(img());
        assert_ne!(a.id, b.id);
        assert_eq!(store.len(), 2);
        assert_eq!(store.expire(Instant::now() + Duration::from_secs(30)), 0);
        assert_eq!(store.expire(Instant::now() + Duration::from_secs(61)), 2);
        assert!(store.touch(&a.id).is_none());
    }

    #[test]
    fn updates_and_removal() {
        let store = SessionStore::new(Duration::from_secs(60));
        let s = store.create(img());
        let m = Mask::from_fn(2, 2, |y, _| y == 0).unwrap();
        assert!(store.update(&s.id, |r| r.fg_mask = Some(Arc::new(m.clone()))));
        assert_eq!(store.touch(&s.id).unwrap().fg_mask.as_deref(), Some(&m));
        assert!(store.remove(&s.id));
        assert!(!store.remove(&s.id));
        assert!(!store.update(&s.id, |_| ()));
        assert!(store.is_empty());
    }
}
