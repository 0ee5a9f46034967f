//! Interest codes: per-level indices and their mixed-radix flat index.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One quantized interest: an index into each sub-dictionary.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct InterestCode {
    pub levels: Vec<usize>,
    pub flat: usize,
}

impl InterestCode {
    pub fn from_levels(levels: Vec<usize>, sizes: &[usize]) -> Result<Self> {
        let flat = flatten(&levels, sizes)?;
        Ok(Self { levels, flat })
    }

    pub fn from_flat(flat: usize, sizes: &[usize]) -> Result<Self> {
        Ok(Self {
            levels: unflatten(flat, sizes)?,
            flat,
        })
    }
}

/// Number of distinct flat codes.
pub fn capacity(sizes: &[usize]) -> usize {
    sizes.iter().product()
}

/// Mixed-radix flat index with level 0 as the least significant digit.
pub fn flatten(levels: &[usize], sizes: &[usize]) -> Result<usize> {
    if levels.len() != sizes.len() {
        return Err(Error::Input(format!(
            "code has {} levels, dictionary has {}",
            levels.len(),
            sizes.len()
        )));
    }
    let mut flat = 0;
    let mut radix = 1;
    for (c, (&m, &size)) in levels.iter().zip(sizes).enumerate() {
        if m >= size {
            return Err(Error::Input(format!(
                "index {m} out of range for level {c} of size {size}"
            )));
        }
        flat += m * radix;
        radix *= size;
    }
    Ok(flat)
}

pub fn unflatten(flat: usize, sizes: &[usize]) -> Result<Vec<usize>> {
    let cap = capacity(sizes);
    if flat >= cap {
        return Err(Error::Input(format!(
            "flat index {flat} out of range for capacity {cap}"
        )));
    }
    let mut rest = flat;
    Ok(sizes
        .iter()
        .map(|&size| {
            let m = rest % size;
            rest /= size;
            m
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const M: [usize; 4] = [32, 16, 8, 4];

    #[test]
    fn mixed_radix_examples() {
        assert_eq!(flatten(&[0, 0, 0, 0], &M).unwrap(), 0);
        assert_eq!(flatten(&[5, 0, 0, 0], &M).unwrap(), 5);
        // 1 + 2*32 + 3*32*16 + 1*32*16*8
        assert_eq!(flatten(&[1, 2, 3, 1], &M).unwrap(), 5697);
        assert_eq!(unflatten(5697, &M).unwrap(), vec![1, 2, 3, 1]);
    }

    #[test]
    fn out_of_range_is_input_error() {
        assert!(matches!(flatten(&[32, 0, 0, 0], &M), Err(Error::Input(_))));
        assert!(matches!(unflatten(16384, &M), Err(Error::Input(_))));
        assert!(matches!(flatten(&[0, 0], &M), Err(Error::Input(_))));
    }

    #[test]
    fn bijection_over_default_dictionary() {
        let cap = capacity(&M);
        assert_eq!(cap, 16384);
        for flat in 0..cap {
            let levels = unflatten(flat, &M).unwrap();
            assert_eq!(flatten(&levels, &M).unwrap(), flat);
        }
    }

    proptest! {
        #[test]
        fn roundtrip_random_radices(sizes in prop::collection::vec(2usize..9, 1..5), seed in any::<u64>()) {
            let cap = capacity(&sizes);
            let flat = (seed as usize) % cap;
            let levels = unflatten(flat, &sizes).unwrap();
            prop_assert_eq!(flatten(&levels, &sizes).unwrap(), flat);
        }
    }
}
