//! Topic names, topic filters and MQTT 3.1.1 wildcard matching.

use std::fmt;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum TopicError {
    #[error("topic is empty")]
    Empty,
    #[error("topic exceeds 65535 bytes")]
    TooLong,
    #[error("topic contains NUL")]
    Nul,
    #[error("topic name `{0}` contains a wildcard")]
    WildcardInName(String),
    #[error("filter `{0}` has a misplaced wildcard")]
    BadWildcard(String),
}

fn check_common(s: &str) -> Result<(), TopicError> {
    if s.is_empty() {
        return Err(TopicError::Empty);
    }
    if s.len() > u16::MAX as usize {
        return Err(TopicError::TooLong);
    }
    if s.contains('\0') {
        return Err(TopicError::Nul);
    }
    Ok(())
}

/// A concrete topic a message is published to.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct TopicName(String);

impl TopicName {
    pub fn new(s: impl Into<String>) -> Result<Self, TopicError> {
        let s = s.into();
        check_common(&s)?;
        if s.contains(['+', '#']) {
            return Err(TopicError::WildcardInName(s));
        }
        Ok(TopicName(s))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for TopicName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// A subscription pattern. `+` matches one level, a trailing `#` matches
/// the remaining zero or more levels.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct TopicFilter(String);

impl TopicFilter {
    pub fn new(s: impl Into<String>) -> Result<Self, TopicError> {
        let s = s.into();
        check_common(&s)?;
        let levels: Vec<&str> = s.split('/').collect();
        let last = levels.len() - 1;
        for (i, level) in levels.iter().enumerate() {
            let bad = match *level {
                "+" => false,
                "#" => i != last,
                other => other.contains(['+', '#']),
            };
            if bad {
                return Err(TopicError::BadWildcard(s));
            }
        }
        Ok(TopicFilter(s))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for TopicFilter {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// Level-wise match of a validated filter against a validated name.
pub fn topic_matches(filter: &TopicFilter, name: &TopicName) -> bool {
    // `$`-topics are only reachable by filters that spell out the first level.
    if name.as_str().starts_with('$') && filter.as_str().starts_with(['+', '#']) {
        return false;
    }
    let mut names = name.as_str().split('/');
    for f in filter.as_str().split('/') {
        if f == "#" {
            return true;
        }
        match names.next() {
            Some(_) if f == "+" => {}
            Some(n) if n == f => {}
            _ => return false,
        }
    }
    names.next().is_none()
}
