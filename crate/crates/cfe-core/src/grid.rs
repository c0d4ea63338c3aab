//! 2D token grid: maps between flattened token indices and (x, y) positions.

/// Row-major grid of tokens. Token `i` sits at `x = i % width`,
/// `y = i / width`, so `i = y * width + x`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TokenGrid {
    pub height: usize,
    pub width: usize,
}

impl TokenGrid {
    pub fn new(height: usize, width: usize) -> TokenGrid {
        TokenGrid { height, width }
    }

    pub fn len(&self) -> usize {
        self.height * self.width
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// (x, y) position of a flattened token index.
    pub fn coords(&self, i: usize) -> (usize, usize) {
        debug_assert!(i < self.len());
        (i % self.width, i / self.width)
    }

    /// Chebyshev (L-inf) distance between two tokens.
    pub fn chebyshev(&self, i: usize, j: usize) -> usize {
        let (xi, yi) = self.coords(i);
        let (xj, yj) = self.coords(j);
        xi.abs_diff(xj).max(yi.abs_diff(yj))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn coords_are_a_bijection() {
        let g = TokenGrid::new(3, 5);
        let mut seen = vec![false; g.len()];
        for i in 0..g.len() {
            let (x, y) = g.coords(i);
            assert!(x < 5 && y < 3);
            assert_eq!(i, y * 5 + x);
            assert!(!seen[i]);
            seen[i] = true;
        }
    }
}
