use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

/// Keep `n_keep` of every `m_group` consecutive channels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct SparsityPattern {
    n_keep: usize,
    m_group: usize,
}

impl SparsityPattern {
    pub const TWO_FOUR: SparsityPattern = SparsityPattern {
        n_keep: 2,
        m_group: 4,
    };
    pub const FOUR_EIGHT: SparsityPattern = SparsityPattern {
        n_keep: 4,
        m_group: 8,
    };

    pub fn new(n_keep: usize, m_group: usize) -> Result<Self> {
        if n_keep == 0 || n_keep >= m_group {
            return Err(Error::Pattern(format!(
                "{n_keep}:{m_group} must satisfy 1 <= N < M"
            )));
        }
        Ok(SparsityPattern { n_keep, m_group })
    }

    /// The degenerate pattern that keeps every channel. Only useful as a
    /// no-prune reference in checks.
    pub fn keep_all(m_group: usize) -> Result<Self> {
        if m_group == 0 {
            return Err(Error::Pattern("group size must be >= 1".into()));
        }
        Ok(SparsityPattern {
            n_keep: m_group,
            m_group,
        })
    }

    pub fn n_keep(&self) -> usize {
        self.n_keep
    }

    pub fn m_group(&self) -> usize {
        self.m_group
    }

    pub fn is_two_four(&self) -> bool {
        *self == Self::TWO_FOUR
    }

    pub fn density(&self) -> f64 {
        self.n_keep as f64 / self.m_group as f64
    }

    pub fn check_channels(&self, channels: usize) -> Result<usize> {
        if channels == 0 || !channels.is_multiple_of(self.m_group) {
            return Err(Error::Divisibility {
                channels,
                group: self.m_group,
            });
        }
        Ok(channels / self.m_group)
    }
}

impl Default for SparsityPattern {
    fn default() -> Self {
        Self::TWO_FOUR
    }
}

impl fmt::Display for SparsityPattern {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.n_keep, self.m_group)
    }
}

impl FromStr for SparsityPattern {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (n, m) = s
            .split_once(':')
            .ok_or_else(|| Error::Pattern(format!("{s:?} is not of the form N:M")))?;
        let parse = |v: &str| {
            v.trim()
                .parse::<usize>()
                .map_err(|_| Error::Pattern(format!("{s:?} is not of the form N:M")))
        };
        SparsityPattern::new(parse(n)?, parse(m)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_common_patterns() {
        assert_eq!(
            "2:4".parse::<SparsityPattern>().unwrap(),
            SparsityPattern::TWO_FOUR
        );
        assert_eq!(
            "4:8".parse::<SparsityPattern>().unwrap(),
            SparsityPattern::FOUR_EIGHT
        );
    }

    #[test]
    fn rejects_malformed() {
        for bad in ["4:3", "0:4", "4:4", "2-4", "a:4", ""] {
            assert!(bad.parse::<SparsityPattern>().is_err(), "{bad}");
        }
    }

    #[test]
    fn divisibility() {
        assert_eq!(SparsityPattern::TWO_FOUR.check_channels(16).unwrap(), 4);
        assert!(SparsityPattern::TWO_FOUR.check_channels(10).is_err());
    }
}
