use crate::error::{Error, Result};

/// A prescription `γ: local state -> action`, applied by every controller.
///
/// The canonical index is the base-`|U|` number whose digit `x` (least
/// significant first) is `γ(x)`. Index 0 maps every state to action 0.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct CoordinationMap {
    assignment: Vec<usize>,
}

impl CoordinationMap {
    pub fn new(assignment: Vec<usize>, num_actions: usize) -> Result<Self> {
        if let Some(x) = assignment.iter().position(|&u| u >= num_actions) {
            return Err(Error::invalid(
                format!("assignment[{x}]"),
                format!("action {} is outside 0..{num_actions}", assignment[x]),
            ));
        }
        Ok(CoordinationMap { assignment })
    }

    /// Every state gets `action`.
    pub fn constant(k: usize, action: usize) -> Self {
        CoordinationMap {
            assignment: vec![action; k],
        }
    }

    pub fn from_index(index: usize, k: usize, num_actions: usize) -> Result<Self> {
        let len = map_count(k, num_actions);
        if index >= len {
            return Err(Error::IndexOutOfRange { index, len });
        }
        let mut rest = index;
        let assignment = (0..k)
            .map(|_| {
                let u = rest % num_actions;
                rest /= num_actions;
                u
            })
            .collect();
        Ok(CoordinationMap { assignment })
    }

    pub fn index(&self, num_actions: usize) -> usize {
        self.assignment
            .iter()
            .rev()
            .fold(0, |acc, &u| acc * num_actions + u)
    }

    pub fn action(&self, state: usize) -> usize {
        self.assignment[state]
    }

    pub fn assignment(&self) -> &[usize] {
        &self.assignment
    }

    pub fn k(&self) -> usize {
        self.assignment.len()
    }
}

/// `|U|^k`.
pub fn map_count(k: usize, num_actions: usize) -> usize {
    num_actions
        .checked_pow(k as u32)
        .expect("coordination map space overflows usize")
}

/// All coordination maps for a `(k, |U|)` pair, indexed canonically.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MapSpace {
    k: usize,
    num_actions: usize,
    maps: Vec<CoordinationMap>,
}

impl MapSpace {
    pub fn new(k: usize, num_actions: usize) -> Self {
        let maps = (0..map_count(k, num_actions))
            .map(|i| CoordinationMap::from_index(i, k, num_actions).expect("index in range"))
            .collect();
        MapSpace {
            k,
            num_actions,
            maps,
        }
    }

    pub fn len(&self) -> usize {
        self.maps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.maps.is_empty()
    }

    pub fn num_actions(&self) -> usize {
        self.num_actions
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn get(&self, index: usize) -> Result<&CoordinationMap> {
        self.maps.get(index).ok_or(Error::IndexOutOfRange {
            index,
            len: self.maps.len(),
        })
    }

    pub fn maps(&self) -> &[CoordinationMap] {
        &self.maps
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn index_roundtrip_and_count() {
        let space = MapSpace::new(3, 2);
        assert_eq!(space.len(), 8);
        for (i, m) in space.maps().iter().enumerate() {
            assert_eq!(m.index(2), i);
        }
        assert_eq!(MapSpace::new(2, 3).len(), 9);
        assert_eq!(space.get(0).unwrap(), &CoordinationMap::constant(3, 0));
    }

    #[test]
    fn digits_are_little_endian() {
        let m = CoordinationMap::from_index(5, 2, 3).unwrap();
        assert_eq!(m.assignment(), &[2, 1]);
    }

    #[test]
    fn rejects_bad_actions() {
        assert!(CoordinationMap::new(vec![0, 3], 3).is_err());
        assert!(CoordinationMap::from_index(9, 2, 3).is_err());
    }
}
