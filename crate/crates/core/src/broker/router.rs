use std::collections::{BTreeMap, HashMap};

use super::codec::QoS;
use super::topic::{topic_matches, TopicFilter, TopicName};

pub type SessionId = u64;

#[derive(Debug)]
struct Subscriber<T> {
    sink: T,
    filters: HashMap<TopicFilter, QoS>,
}

/// Every connected session's filters, keyed by session id. `T` is whatever
/// the server uses to reach the session (a queue sender in production).
#[derive(Debug)]
pub struct SubscriptionTable<T> {
    sessions: BTreeMap<SessionId, Subscriber<T>>,
}

impl<T> Default for SubscriptionTable<T> {
    fn default() -> Self {
        SubscriptionTable {
            sessions: BTreeMap::new(),
        }
    }
}

impl<T> SubscriptionTable<T> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, id: SessionId, sink: T) {
        self.sessions.insert(
            id,
            Subscriber {
                sink,
                filters: HashMap::new(),
            },
        );
    }

    pub fn remove(&mut self, id: SessionId) -> Option<T> {
        self.sessions.remove(&id).map(|s| s.sink)
    }

    pub fn subscribe(&mut self, id: SessionId, filter: TopicFilter, qos: QoS) {
        if let Some(s) = self.sessions.get_mut(&id) {
            s.filters.insert(filter, qos);
        }
    }

    pub fn unsubscribe(&mut self, id: SessionId, filter: &TopicFilter) {
        if let Some(s) = self.sessions.get_mut(&id) {
            s.filters.remove(filter);
        }
    }

    pub fn sink(&self, id: SessionId) -> Option<&T> {
        self.sessions.get(&id).map(|s| &s.sink)
    }

    pub fn len(&self) -> usize {
        self.sessions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sessions.is_empty()
    }

    /// One entry per session with at least one matching filter, at the
    /// highest QoS granted among its matching filters; ordered by session id.
    pub fn route_publish(&self, topic: &TopicName) -> Vec<(SessionId, QoS, &T)> {
        self.sessions
            .iter()
            .filter_map(|(id, s)| {
                s.filters
                    .iter()
                    .filter(|(f, _)| topic_matches(f, topic))
                    .map(|(_, q)| *q)
                    .max()
                    .map(|q| (*id, q, &s.sink))
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn f(s: &str) -> TopicFilter {
        TopicFilter::new(s).unwrap()
    }

    fn ids(table: &SubscriptionTable<()>, topic: &str) -> Vec<(SessionId, QoS)> {
        table
            .route_publish(&TopicName::new(topic).unwrap())
            .into_iter()
            .map(|(id, q, _)| (id, q))
            .collect()
    }

    #[test]
    fn no_subscribers_no_deliveries() {
        let table = SubscriptionTable::<()>::new();
        assert!(ids(&table, "a/b").is_empty());
    }

    #[test]
    fn one_delivery_per_matching_session() {
        let mut table = SubscriptionTable::new();
        table.register(1, ());
        table.register(2, ());
        table.subscribe(1, f("a/#"), QoS::AtLeastOnce);
        table.subscribe(2, f("a/+"), QoS::AtMostOnce);
        assert_eq!(
            ids(&table, "a/b"),
            vec![(1, QoS::AtLeastOnce), (2, QoS::AtMostOnce)]
        );
    }

    #[test]
    fn overlapping_filters_deliver_once_at_max_qos() {
        let mut table = SubscriptionTable::new();
        table.register(1, ());
        table.subscribe(1, f("a/#"), QoS::AtMostOnce);
        table.subscribe(1, f("a/b"), QoS::AtLeastOnce);
        assert_eq!(ids(&table, "a/b"), vec![(1, QoS::AtLeastOnce)]);
        table.unsubscribe(1, &f("a/b"));
        assert_eq!(ids(&table, "a/b"), vec![(1, QoS::AtMostOnce)]);
        table.remove(1);
        assert!(ids(&table, "a/b").is_empty());
    }
}
