use serde::{Deserialize, Serialize};
use thiserror::Error;

/// A reordering of candidate positions `1..=K`, best first.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<usize>", into = "Vec<usize>")]
pub struct Permutation {
    order: Vec<usize>,
}

#[derive(Debug, Clone, Error, PartialEq, Eq)]
#[error("{order:?} is not a permutation of 1..={k}")]
pub struct PermutationError {
    pub order: Vec<usize>,
    pub k: usize,
}

impl Permutation {
    pub fn new(order: Vec<usize>) -> Result<Self, PermutationError> {
        let k = order.len();
        let mut seen = vec![false; k];
        for &m in &order {
            if m == 0 || m > k || std::mem::replace(&mut seen[m - 1], true) {
                return Err(PermutationError { order, k });
            }
        }
        Ok(Self { order })
    }

    pub fn identity(k: usize) -> Self {
        Self {
            order: (1..=k).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.order
    }

    pub fn is_identity(&self) -> bool {
        self.order.iter().enumerate().all(|(i, &m)| m == i + 1)
    }
}

impl TryFrom<Vec<usize>> for Permutation {
    type Error = PermutationError;

    fn try_from(order: Vec<usize>) -> Result<Self, Self::Error> {
        Self::new(order)
    }
}

impl From<Permutation> for Vec<usize> {
    fn from(p: Permutation) -> Self {
        p.order
    }
}

impl std::fmt::Display for Permutation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str("[")?;
        for (i, m) in self.order.iter().enumerate() {
            if i > 0 {
                f.write_str(", ")?;
            }
            write!(f, "{m}")?;
        }
        f.write_str("]")
    }
}

#[derive(Debug, Clone, Copy, Error, PartialEq, Eq)]
#[error("no bracketed integer list in ranker output")]
pub struct ParseFailure;

/// Finds the first `[int, int, ...]` in `raw`.
///
/// Integers may carry a sign; whitespace is allowed around elements and a
/// single trailing comma is tolerated. Values beyond `i64` saturate.
pub fn extract_integer_list(raw: &[u8]) -> Option<Vec<i64>> {
    let mut pos = 0;
    while let Some(offset) = raw[pos..].iter().position(|&b| b == b'[') {
        let open = pos + offset;
        match list_at(raw, open + 1) {
            Ok(list) => return Some(list),
            // Nothing between `open` and the failure point can open a list,
            // so scanning resumes there.
            Err(stop) => pos = stop.max(open + 1),
        }
    }
    None
}

/// Parses a list body starting right after `[`. On failure returns the
/// offset where parsing stopped.
fn list_at(raw: &[u8], mut i: usize) -> Result<Vec<i64>, usize> {
    let skip_ws = |i: &mut usize| {
        while raw.get(*i).is_some_and(u8::is_ascii_whitespace) {
            *i += 1;
        }
    };
    let mut out = Vec::new();
    loop {
        skip_ws(&mut i);
        match raw.get(i) {
            Some(b']') if !out.is_empty() => return Ok(out),
            Some(b'-' | b'+' | b'0'..=b'9') => {}
            _ => return Err(i),
        }
        let negative = raw[i] == b'-';
        if matches!(raw[i], b'-' | b'+') {
            i += 1;
        }
        let start = i;
        let mut value: i64 = 0;
        while let Some(d @ b'0'..=b'9') = raw.get(i).copied() {
            value = value.saturating_mul(10).saturating_add(i64::from(d - b'0'));
            i += 1;
        }
        if i == start {
            return Err(i);
        }
        out.push(if negative { -value } else { value });
        skip_ws(&mut i);
        match raw.get(i) {
            Some(b',') => i += 1,
            Some(b']') => return Ok(out),
            _ => return Err(i),
        }
    }
}

/// Turns arbitrary integers into a permutation of `1..=k`: out-of-range
/// entries are dropped, duplicates keep their first occurrence and missing
/// indices are appended in ascending order.
pub fn repair_ranking(raw_list: &[i64], k: usize) -> Permutation {
    let mut seen = vec![false; k];
    let mut order = Vec::with_capacity(k);
    for &m in raw_list {
        if m < 1 || m as u64 > k as u64 {
            continue;
        }
        let m = m as usize;
        if !std::mem::replace(&mut seen[m - 1], true) {
            order.push(m);
        }
    }
    order.extend((1..=k).filter(|&m| !seen[m - 1]));
    Permutation { order }
}

/// Extracts the ranker's list from free text and repairs it for `k` candidates.
pub fn parse_ranking(raw: impl AsRef<[u8]>, k: usize) -> Result<Permutation, ParseFailure> {
    let list = extract_integer_list(raw.as_ref()).ok_or(ParseFailure)?;
    Ok(repair_ranking(&list, k))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn perm(v: &[usize]) -> Permutation {
        Permutation::new(v.to_vec()).unwrap()
    }

    #[test]
    fn parse_examples() {
        assert_eq!(
            parse_ranking("[4, 2, 8, 1, 5, 3, 6, 9, 10, 7]", 10).unwrap(),
            perm(&[4, 2, 8, 1, 5, 3, 6, 9, 10, 7])
        );
        assert_eq!(
            parse_ranking("Sure! Here is the ranking: [2, 1, 3]", 3).unwrap(),
            perm(&[2, 1, 3])
        );
        assert_eq!(parse_ranking("no list here", 3), Err(ParseFailure));
    }

    #[test]
    fn extraction_edge_cases() {
        assert_eq!(extract_integer_list(b"[[2,1,3]]"), Some(vec![2, 1, 3]));
        assert_eq!(extract_integer_list(b"[a] then [ 3 ,1,\n2, ]"), Some(vec![3, 1, 2]));
        assert_eq!(extract_integer_list(b"[1, 2, ..., 10]"), None);
        assert_eq!(extract_integer_list(b"[]"), None);
        assert_eq!(extract_integer_list(b"[-1, +2]"), Some(vec![-1, 2]));
        assert_eq!(
            extract_integer_list(b"[99999999999999999999999]"),
            Some(vec![i64::MAX])
        );
        assert_eq!(extract_integer_list(b"[1, 2"), None);
        assert_eq!(extract_integer_list(b"```python\n[1, 3, 2]\n```"), Some(vec![1, 3, 2]));
    }

    #[test]
    fn repair_examples() {
        assert_eq!(repair_ranking(&[3, 3, 1], 3), perm(&[3, 1, 2]));
        assert_eq!(repair_ranking(&[1, 2, 3], 3), perm(&[1, 2, 3]));
        assert_eq!(repair_ranking(&[], 2), perm(&[1, 2]));
        assert_eq!(repair_ranking(&[0, -4, 11, 2], 3), perm(&[2, 1, 3]));
        assert_eq!(parse_ranking("[4, 2, 8, 1, 5, 3, 6, 9, 10, 7, 11]", 2).unwrap(), perm(&[2, 1]));
    }

    #[test]
    fn permutation_validation() {
        assert!(Permutation::new(vec![1, 1]).is_err());
        assert!(Permutation::new(vec![0, 1]).is_err());
        assert!(Permutation::new(vec![3]).is_err());
        assert!(Permutation::identity(4).is_identity());
        assert!(!perm(&[2, 1]).is_identity());
        assert_eq!(perm(&[2, 1, 3]).to_string(), "[2, 1, 3]");
    }

    proptest! {
        #[test]
        fn repair_always_valid(list in prop::collection::vec(-5i64..30, 0..40), k in 0usize..25) {
            let p = repair_ranking(&list, k);
            prop_assert_eq!(p.len(), k);
            prop_assert!(Permutation::new(p.as_slice().to_vec()).is_ok());
        }

        #[test]
        fn repair_identity_exactly_on_valid(order in (1usize..20).prop_flat_map(|k| Just((1..=k).collect::<Vec<_>>()).prop_shuffle())) {
            let k = order.len();
            let list: Vec<i64> = order.iter().map(|&m| m as i64).collect();
            let repaired = repair_ranking(&list, k);
            prop_assert_eq!(repaired.as_slice(), order.as_slice());
        }

        #[test]
        fn repair_changes_invalid(list in prop::collection::vec(0i64..12, 0..12), k in 1usize..10) {
            let valid = list.len() == k
                && Permutation::new(list.iter().map(|&m| m as usize).collect()).is_ok();
            let repaired = repair_ranking(&list, k);
            let same = repaired.as_slice().iter().map(|&m| m as i64).eq(list.iter().copied());
            prop_assert_eq!(same, valid);
        }

        #[test]
        fn parse_never_panics(bytes in prop::collection::vec(any::<u8>(), 0..200), k in 0usize..15) {
            if let Ok(p) = parse_ranking(&bytes, k) {
                prop_assert_eq!(p.len(), k);
            }
        }
    }
}
