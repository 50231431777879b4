use crate::error::{Error, Result};

/// The k×k window of keys visible to every query on an H×W token grid,
/// stored in compressed-row form. Windows are clipped at the grid border.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ScopeMask {
    height: usize,
    width: usize,
    window: usize,
    offsets: Vec<usize>,
    indices: Vec<usize>,
}

impl ScopeMask {
    pub fn new(height: usize, width: usize, window: usize) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::config(format!(
                "scope grid must be non-empty, got {height}×{width}"
            )));
        }
        if window == 0 || window % 2 == 0 {
            return Err(Error::config(format!(
                "attention.k must be a positive odd integer, got {window}"
            )));
        }
        let r = (window / 2) as isize;
        let n = height * width;
        let mut offsets = Vec::with_capacity(n + 1);
        let mut indices = Vec::with_capacity(n * window * window);
        offsets.push(0);
        for i in 0..n {
            let (row, col) = ((i / width) as isize, (i % width) as isize);
            for y in (row - r).max(0)..=(row + r).min(height as isize - 1) {
                for x in (col - r).max(0)..=(col + r).min(width as isize - 1) {
                    indices.push(y as usize * width + x as usize);
                }
            }
            offsets.push(indices.len());
        }
        Ok(ScopeMask {
            height,
            width,
            window,
            offsets,
            indices,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn window(&self) -> usize {
        self.window
    }

    /// Number of tokens `H·W`.
    pub fn len(&self) -> usize {
        self.height * self.width
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Total number of (query, key) pairs, `Σ_i |scope(i)|`.
    pub fn nnz(&self) -> usize {
        self.indices.len()
    }

    /// Keys visible to query `i`, ascending.
    pub fn scope(&self, i: usize) -> &[usize] {
        &self.indices[self.offsets[i]..self.offsets[i + 1]]
    }

    /// CSR entry range of query `i`.
    pub fn range(&self, i: usize) -> std::ops::Range<usize> {
        self.offsets[i]..self.offsets[i + 1]
    }

    pub fn contains(&self, i: usize, j: usize) -> bool {
        self.scope(i).binary_search(&j).is_ok()
    }
}

/// Builds the k×k clipped window mask for an H×W grid.
pub fn build_scope(height: usize, width: usize, window: usize) -> Result<ScopeMask> {
    ScopeMask::new(height, width, window)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn window_one_is_self_only() {
        let s = build_scope(3, 3, 1).unwrap();
        for i in 0..9 {
            assert_eq!(s.scope(i), &[i]);
        }
    }

    #[test]
    fn center_sees_whole_3x3_grid() {
        let s = build_scope(3, 3, 3).unwrap();
        assert_eq!(s.scope(4), &[0, 1, 2, 3, 4, 5, 6, 7, 8]);
    }

    #[test]
    fn corner_is_clipped() {
        let s = build_scope(3, 3, 3).unwrap();
        // brute-force enumeration of window ∩ grid for cell (0,0)
        let mut expect = vec![];
        for dy in -1i32..=1 {
            for dx in -1i32..=1 {
                if (0..3).contains(&dy) && (0..3).contains(&dx) {
                    expect.push((dy * 3 + dx) as usize);
                }
            }
        }
        assert_eq!(expect, vec![0, 1, 3, 4]);
        assert_eq!(s.scope(0), expect.as_slice());
    }

    #[test]
    fn even_window_rejected() {
        assert!(matches!(build_scope(3, 3, 2), Err(Error::Config(_))));
        assert!(build_scope(3, 3, 0).is_err());
        assert!(build_scope(0, 3, 3).is_err());
    }

    proptest! {
        #[test]
        fn scope_bounds(h in 1usize..9, w in 1usize..9, half in 0usize..4) {
            let k = 2 * half + 1;
            let s = build_scope(h, w, k).unwrap();
            let lower = k.div_ceil(2).min(h) * k.div_ceil(2).min(w);
            for i in 0..h * w {
                let sc = s.scope(i);
                prop_assert!(sc.contains(&i));
                prop_assert!(sc.len() <= k * k);
                prop_assert!(sc.len() >= lower);
                prop_assert!(sc.iter().all(|&j| j < h * w));
                prop_assert!(sc.windows(2).all(|p| p[0] < p[1]));
            }
        }
    }
}
