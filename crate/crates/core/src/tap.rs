/// One position of a 3x3x3 kernel: temporal offset `tau` and spatial grid
/// offset `pn = (row, col)`, each in {-1, 0, 1}.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TapIndex {
    pub tau: i8,
    pub pn: (i8, i8),
}

impl TapIndex {
    pub const COUNT: usize = 27;

    pub fn new(tau: i8, row: i8, col: i8) -> Option<Self> {
        let ok = |v: i8| (-1..=1).contains(&v);
        (ok(tau) && ok(row) && ok(col)).then_some(TapIndex { tau, pn: (row, col) })
    }

    pub fn from_linear(k: usize) -> Option<Self> {
        if k >= Self::COUNT {
            return None;
        }
        let k = k as i8;
        Some(TapIndex {
            tau: k / 9 - 1,
            pn: ((k / 3) % 3 - 1, k % 3 - 1),
        })
    }

    /// Matches the row-major (K_t, K_h, K_w) flattening of a 3x3x3 kernel.
    pub fn linear(self) -> usize {
        ((self.tau + 1) as usize) * 9 + ((self.pn.0 + 1) as usize) * 3 + (self.pn.1 + 1) as usize
    }

    pub fn all() -> impl Iterator<Item = TapIndex> {
        (0..Self::COUNT).filter_map(Self::from_linear)
    }
}
