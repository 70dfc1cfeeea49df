//! Window partition/reverse, cyclic shifting with attention masks, and
//! relative-position-bias indexing. Everything here is pure index
//! arithmetic; the tensor-level entry points lower to a single `remap`
//! whose scatter-add adjoint is exact.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{Tape, Tensor, Var};
use std::sync::Arc;

/// Large negative logit for masked attention pairs; effectively zero weight
/// after softmax at f32.
pub const MASK_NEG: f64 = -1e9;

/// Geometry of one partition: original extents, window size, padding applied
/// to reach divisibility, and the resulting window count.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct WindowGrid {
    pub h: usize,
    pub w: usize,
    pub m: usize,
    pub pad_h: usize,
    pub pad_w: usize,
}

impl WindowGrid {
    pub fn new(h: usize, w: usize, m: usize) -> Result<WindowGrid> {
        if m == 0 {
            return Err(Error::Config("window size must be at least 1".into()));
        }
        let pad_h = (m - h % m) % m;
        let pad_w = (m - w % m) % m;
        // Reflect padding (edge excluded) needs pad < extent.
        if h == 0 || w == 0 || pad_h >= h || pad_w >= w {
            return Err(Error::Config(format!(
                "window size {m} too large for {h}x{w} (reflect padding would exceed the extent)"
            )));
        }
        Ok(WindowGrid {
            h,
            w,
            m,
            pad_h,
            pad_w,
        })
    }

    pub fn padded_h(&self) -> usize {
        self.h + self.pad_h
    }

    pub fn padded_w(&self) -> usize {
        self.w + self.pad_w
    }

    /// Window count N = padded area / M^2.
    pub fn num_windows(&self) -> usize {
        (self.padded_h() / self.m) * (self.padded_w() / self.m)
    }
}

/// Reflect index (edge not repeated), the padding mode used throughout.
fn reflect(i: isize, len: usize) -> usize {
    let len = len as isize;
    let mut i = i;
    if i < 0 {
        i = -i;
    }
    if i >= len {
        i = 2 * len - 2 - i;
    }
    debug_assert!((0..len).contains(&i));
    i as usize
}

/// Map for reflect-padding `[c, h, w]` to `[c, h+pad_h, w+pad_w]`
/// (padding added on the bottom/right).
pub fn reflect_pad_map(c: usize, h: usize, w: usize, pad_h: usize, pad_w: usize) -> Vec<usize> {
    let hp = h + pad_h;
    let wp = w + pad_w;
    let mut map = Vec::with_capacity(c * hp * wp);
    for ci in 0..c {
        for oh in 0..hp {
            let ih = reflect(oh as isize, h);
            for ow in 0..wp {
                let iw = reflect(ow as isize, w);
                map.push((ci * h + ih) * w + iw);
            }
        }
    }
    map
}

/// Map for cropping `[c, hp, wp]` back to `[c, h, w]` (top-left corner).
pub fn crop_map(c: usize, hp: usize, wp: usize, h: usize, w: usize) -> Vec<usize> {
    let mut map = Vec::with_capacity(c * h * w);
    for ci in 0..c {
        for oh in 0..h {
            for ow in 0..w {
                map.push((ci * hp + oh) * wp + ow);
            }
        }
    }
    map
}

/// Map rolling `[c, h, w]` spatially by (-shift, -shift) on the torus.
pub fn roll_map(c: usize, h: usize, w: usize, shift_down: isize, shift_right: isize) -> Vec<usize> {
    let mut map = Vec::with_capacity(c * h * w);
    let wrap = |v: isize, len: usize| -> usize { (v.rem_euclid(len as isize)) as usize };
    for ci in 0..c {
        for oh in 0..h {
            let ih = wrap(oh as isize - shift_down, h);
            for ow in 0..w {
                let iw = wrap(ow as isize - shift_right, w);
                map.push((ci * h + ih) * w + iw);
            }
        }
    }
    map
}

/// Map from `[c, hp, wp]` (divisible extents) to windows `[n, m*m, c]` in
/// row-major window order with channel-last tokens.
pub fn partition_map(c: usize, hp: usize, wp: usize, m: usize) -> Vec<usize> {
    let wins_w = wp / m;
    let n = (hp / m) * wins_w;
    let mut map = Vec::with_capacity(n * m * m * c);
    for win in 0..n {
        let wr = win / wins_w;
        let wc = win % wins_w;
        for t in 0..m * m {
            let th = wr * m + t / m;
            let tw = wc * m + t % m;
            for ci in 0..c {
                map.push((ci * hp + th) * wp + tw);
            }
        }
    }
    map
}

/// Exact inverse of [`partition_map`]: `[n, m*m, c]` back to `[c, hp, wp]`.
pub fn reverse_map(c: usize, hp: usize, wp: usize, m: usize) -> Vec<usize> {
    let wins_w = wp / m;
    let mm = m * m;
    let mut map = Vec::with_capacity(c * hp * wp);
    for ci in 0..c {
        for h in 0..hp {
            for w in 0..wp {
                let win = (h / m) * wins_w + w / m;
                let t = (h % m) * m + w % m;
                map.push((win * mm + t) * c + ci);
            }
        }
    }
    map
}

/// Relative-position index table: `index(i, j)` encodes the 2D offset
/// between token positions i and j inside an M x M window, in
/// `[0, (2M-1)^2)`.
#[derive(Clone, Debug)]
pub struct RelPosIndex {
    pub m: usize,
    index: Vec<usize>,
}

impl RelPosIndex {
    pub fn new(m: usize) -> RelPosIndex {
        let mm = m * m;
        let side = 2 * m - 1;
        let mut index = Vec::with_capacity(mm * mm);
        for i in 0..mm {
            let (ri, ci) = (i / m, i % m);
            for j in 0..mm {
                let (rj, cj) = (j / m, j % m);
                let dr = ri as isize - rj as isize + (m as isize - 1);
                let dc = ci as isize - cj as isize + (m as isize - 1);
                index.push(dr as usize * side + dc as usize);
            }
        }
        RelPosIndex { m, index }
    }

    pub fn get(&self, i: usize, j: usize) -> usize {
        self.index[i * self.m * self.m + j]
    }

    pub fn table(&self) -> &[usize] {
        &self.index
    }

    pub fn num_buckets(&self) -> usize {
        (2 * self.m - 1) * (2 * self.m - 1)
    }
}

/// Additive attention mask for shifted windows: entries are 0 where the
/// query/key pair lies in the same pre-shift region and [`MASK_NEG`] where
/// the pair straddles the cyclic wrap.
#[derive(Clone, Debug)]
pub struct ShiftMask {
    pub m: usize,
    pub shift: usize,
    /// One `[m*m, m*m]` table per window, flattened `[n, m*m, m*m]`.
    pub mask: Vec<f64>,
    pub num_windows: usize,
}

impl ShiftMask {
    pub fn new(hp: usize, wp: usize, m: usize, shift: usize) -> ShiftMask {
        let wins_w = wp / m;
        let n = (hp / m) * wins_w;
        let mm = m * m;
        if shift == 0 {
            return ShiftMask {
                m,
                shift,
                mask: vec![0.0; n * mm * mm],
                num_windows: n,
            };
        }
        // Region ids on the shifted canvas, three bands per axis.
        let band = |pos: usize, len: usize| -> usize {
            if pos < len - m {
                0
            } else if pos < len - shift {
                1
            } else {
                2
            }
        };
        let mut ids = vec![0usize; hp * wp];
        for h in 0..hp {
            for w in 0..wp {
                ids[h * wp + w] = band(h, hp) * 3 + band(w, wp);
            }
        }
        let mut mask = vec![0.0; n * mm * mm];
        for win in 0..n {
            let wr = win / wins_w;
            let wc = win % wins_w;
            let win_ids: Vec<usize> = (0..mm)
                .map(|t| ids[(wr * m + t / m) * wp + wc * m + t % m])
                .collect();
            for i in 0..mm {
                for j in 0..mm {
                    if win_ids[i] != win_ids[j] {
                        mask[(win * mm + i) * mm + j] = MASK_NEG;
                    }
                }
            }
        }
        ShiftMask {
            m,
            shift,
            mask,
            num_windows: n,
        }
    }

    pub fn is_zero(&self) -> bool {
        self.mask.iter().all(|&v| v == 0.0)
    }

    pub fn as_tensor<S: Scalar>(&self) -> Tensor<S> {
        let mm = self.m * self.m;
        Tensor::from_fn(&[self.num_windows, mm, mm], |i| S::from_f64(self.mask[i]))
    }
}

// ---- tensor-level operations ------------------------------------------------

/// Split `[c, h, w]` into flattened windows `[n, m*m, c]`, reflect-padding
/// to divisible extents when needed.
pub fn window_partition<S: Scalar>(
    tape: &mut Tape<S>,
    x: Var,
    m: usize,
) -> Result<(Var, WindowGrid)> {
    let shape = tape.shape(x).to_vec();
    if shape.len() != 3 {
        return Err(Error::shape("window_partition input", &shape, &[0, 0, 0]));
    }
    let (h, w) = (shape[1], shape[2]);
    let grid = WindowGrid::new(h, w, m)?;
    let padded = pad_to_grid(tape, x, &grid)?;
    let windows = partition_divisible(tape, padded, &grid)?;
    Ok((windows, grid))
}

/// Reassemble windows produced by [`window_partition`], cropping padding.
pub fn window_reverse<S: Scalar>(tape: &mut Tape<S>, w: Var, grid: &WindowGrid) -> Result<Var> {
    let c = check_windows_shape(tape.shape(w), grid)?;
    let merged = reverse_divisible(tape, w, grid)?;
    crop_from_grid(tape, merged, grid, c)
}

/// Reflect-pad `[c, h, w]` to the grid's divisible extents. No-op shape-wise
/// when already divisible (still records a remap).
pub fn pad_to_grid<S: Scalar>(tape: &mut Tape<S>, x: Var, grid: &WindowGrid) -> Result<Var> {
    let c = tape.shape(x)[0];
    if grid.pad_h == 0 && grid.pad_w == 0 {
        return Ok(x);
    }
    let map = reflect_pad_map(c, grid.h, grid.w, grid.pad_h, grid.pad_w);
    tape.remap(x, vec![c, grid.padded_h(), grid.padded_w()], Arc::new(map))
}

/// Crop `[c, hp, wp]` back to the grid's original extents.
pub fn crop_from_grid<S: Scalar>(
    tape: &mut Tape<S>,
    x: Var,
    grid: &WindowGrid,
    c: usize,
) -> Result<Var> {
    if grid.pad_h == 0 && grid.pad_w == 0 {
        return Ok(x);
    }
    let map = crop_map(c, grid.padded_h(), grid.padded_w(), grid.h, grid.w);
    tape.remap(x, vec![c, grid.h, grid.w], Arc::new(map))
}

/// Partition `[c, hp, wp]` with divisible extents into `[n, m*m, c]`.
pub fn partition_divisible<S: Scalar>(
    tape: &mut Tape<S>,
    x: Var,
    grid: &WindowGrid,
) -> Result<Var> {
    let c = tape.shape(x)[0];
    let map = partition_map(c, grid.padded_h(), grid.padded_w(), grid.m);
    tape.remap(
        x,
        vec![grid.num_windows(), grid.m * grid.m, c],
        Arc::new(map),
    )
}

/// Inverse of [`partition_divisible`]: windows back to `[c, hp, wp]`.
pub fn reverse_divisible<S: Scalar>(tape: &mut Tape<S>, w: Var, grid: &WindowGrid) -> Result<Var> {
    let c = check_windows_shape(tape.shape(w), grid)?;
    let map = reverse_map(c, grid.padded_h(), grid.padded_w(), grid.m);
    tape.remap(w, vec![c, grid.padded_h(), grid.padded_w()], Arc::new(map))
}

fn check_windows_shape(shape: &[usize], grid: &WindowGrid) -> Result<usize> {
    if shape.len() != 3 || shape[0] != grid.num_windows() || shape[1] != grid.m * grid.m {
        return Err(Error::shape(
            "window tensor vs grid",
            shape,
            &[grid.num_windows(), grid.m * grid.m, 0],
        ));
    }
    Ok(shape[2])
}

/// Torus roll of `[c, h, w]` by `(-shift, -shift)`; `cyclic_unshift` inverts.
pub fn cyclic_shift<S: Scalar>(tape: &mut Tape<S>, x: Var, shift: usize) -> Result<Var> {
    roll(tape, x, -(shift as isize))
}

pub fn cyclic_unshift<S: Scalar>(tape: &mut Tape<S>, x: Var, shift: usize) -> Result<Var> {
    roll(tape, x, shift as isize)
}

fn roll<S: Scalar>(tape: &mut Tape<S>, x: Var, amount: isize) -> Result<Var> {
    let shape = tape.shape(x).to_vec();
    if shape.len() != 3 {
        return Err(Error::shape("cyclic_shift input", &shape, &[0, 0, 0]));
    }
    if amount == 0 {
        return Ok(x);
    }
    let map = roll_map(shape[0], shape[1], shape[2], amount, amount);
    tape.remap(x, shape, Arc::new(map))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::random_tensor;
    use crate::rng::Rng;
    use proptest::prelude::*;

    #[test]
    fn single_window_is_the_flattened_map() {
        let mut rng = Rng::new(1);
        let x = random_tensor(&mut rng, &[3, 8, 8]);
        let mut tape = Tape::<f64>::new();
        let v = tape.leaf(&x, false);
        let (wins, grid) = window_partition(&mut tape, v, 8).unwrap();
        assert_eq!(grid.num_windows(), 1);
        assert_eq!(tape.shape(wins), &[1, 64, 3]);
        // token t, channel c should equal x[c, t/8, t%8]
        let d = tape.data(wins);
        for t in 0..64 {
            for c in 0..3 {
                assert_eq!(d[t * 3 + c], x.data()[(c * 8 + t / 8) * 8 + t % 8]);
            }
        }
    }

    #[test]
    fn window_count_matches_area_over_m_squared() {
        let grid = WindowGrid::new(32, 32, 8).unwrap();
        assert_eq!(grid.num_windows(), 16);
        assert_eq!(grid.pad_h, 0);
        assert_eq!(grid.pad_w, 0);
    }

    #[test]
    fn partition_reverse_round_trip_divisible() {
        let mut rng = Rng::new(2);
        let x = random_tensor(&mut rng, &[2, 16, 24]);
        let mut tape = Tape::<f64>::new();
        let v = tape.leaf(&x, false);
        let (wins, grid) = window_partition(&mut tape, v, 8).unwrap();
        let back = window_reverse(&mut tape, wins, &grid).unwrap();
        assert_eq!(tape.data(back), x.data());
    }

    #[test]
    fn padded_round_trip_crops_back() {
        let mut rng = Rng::new(3);
        let x = random_tensor(&mut rng, &[2, 10, 10]);
        let mut tape = Tape::<f64>::new();
        let v = tape.leaf(&x, false);
        let (wins, grid) = window_partition(&mut tape, v, 8).unwrap();
        assert_eq!(grid.pad_h, 6);
        assert_eq!(grid.pad_w, 6);
        assert_eq!(tape.shape(wins), &[4, 64, 2]);
        let back = window_reverse(&mut tape, wins, &grid).unwrap();
        assert_eq!(tape.shape(back), &[2, 10, 10]);
        assert_eq!(tape.data(back), x.data());
    }

    #[test]
    fn window_too_large_for_reflect_padding_is_an_error() {
        assert!(WindowGrid::new(3, 3, 8).is_err());
        assert!(WindowGrid::new(5, 5, 4).is_ok());
    }

    #[test]
    fn shift_identities() {
        let mut rng = Rng::new(4);
        let x = random_tensor(&mut rng, &[2, 6, 6]);
        let mut tape = Tape::<f64>::new();
        let v = tape.leaf(&x, false);

        let zero = cyclic_shift(&mut tape, v, 0).unwrap();
        assert_eq!(tape.data(zero), x.data());

        let full = cyclic_shift(&mut tape, v, 6).unwrap();
        assert_eq!(tape.data(full), x.data());

        let shifted = cyclic_shift(&mut tape, v, 2).unwrap();
        let back = cyclic_unshift(&mut tape, shifted, 2).unwrap();
        assert_eq!(tape.data(back), x.data());
    }

    #[test]
    fn rel_pos_index_m1() {
        let idx = RelPosIndex::new(1);
        assert_eq!(idx.table(), &[0]);
        assert_eq!(idx.num_buckets(), 1);
    }

    /// Enumerated by hand from the offset formula.
    #[test]
    fn rel_pos_index_m2() {
        let idx = RelPosIndex::new(2);
        assert_eq!(idx.num_buckets(), 9);
        for i in 0..4 {
            assert_eq!(idx.get(i, i), 4, "zero offset must hit the center bucket");
            for j in 0..4 {
                assert!(idx.get(i, j) < 9);
                // swapping i and j negates the offset
                assert_eq!(idx.get(i, j) + idx.get(j, i), 2 * (2 * 2));
            }
        }
        // all nine buckets reachable
        let mut seen = [false; 9];
        for i in 0..4 {
            for j in 0..4 {
                seen[idx.get(i, j)] = true;
            }
        }
        assert!(seen.iter().all(|&s| s));
    }

    #[test]
    fn rel_pos_index_zero_offset_count_is_m_squared() {
        for m in 1..=4 {
            let idx = RelPosIndex::new(m);
            let center = (m - 1) * (2 * m - 1) + (m - 1);
            let count = (0..m * m)
                .flat_map(|i| (0..m * m).map(move |j| (i, j)))
                .filter(|&(i, j)| idx.get(i, j) == center)
                .count();
            assert_eq!(count, m * m);
        }
    }

    #[test]
    fn shift_mask_zero_shift_is_all_zero() {
        let mask = ShiftMask::new(16, 16, 8, 0);
        assert!(mask.is_zero());
    }

    #[test]
    fn shift_mask_is_symmetric_and_binary() {
        let mask = ShiftMask::new(16, 16, 8, 4);
        assert!(!mask.is_zero());
        let mm = 64;
        for win in 0..mask.num_windows {
            for i in 0..mm {
                for j in 0..mm {
                    let a = mask.mask[(win * mm + i) * mm + j];
                    let b = mask.mask[(win * mm + j) * mm + i];
                    assert_eq!(a, b);
                    assert!(a == 0.0 || a == MASK_NEG);
                }
            }
        }
        // interior window (index 0) is unmasked; the wrap-adjacent windows are not
        assert!(mask.mask[..mm * mm].iter().all(|&v| v == 0.0));
        let last = mask.num_windows - 1;
        assert!(mask.mask[last * mm * mm..].contains(&MASK_NEG));
    }

    proptest! {
        #[test]
        fn prop_partition_reverse_is_identity(
            c in 1usize..3,
            h in 4usize..20,
            w in 4usize..20,
            m in 2usize..5,
            seed in 0u64..1000,
        ) {
            prop_assume!(WindowGrid::new(h, w, m).is_ok());
            let mut rng = Rng::new(seed);
            let x = random_tensor(&mut rng, &[c, h, w]);
            let mut tape = Tape::<f64>::new();
            let v = tape.leaf(&x, false);
            let (wins, grid) = window_partition(&mut tape, v, m).unwrap();
            let back = window_reverse(&mut tape, wins, &grid).unwrap();
            prop_assert_eq!(tape.data(back), x.data());
        }

        #[test]
        fn prop_shift_unshift_is_identity(
            h in 2usize..12,
            shift in 0usize..15,
            seed in 0u64..1000,
        ) {
            let mut rng = Rng::new(seed);
            let x = random_tensor(&mut rng, &[1, h, h]);
            let mut tape = Tape::<f64>::new();
            let v = tape.leaf(&x, false);
            let s = cyclic_shift(&mut tape, v, shift).unwrap();
            let u = cyclic_unshift(&mut tape, s, shift).unwrap();
            prop_assert_eq!(tape.data(u), x.data());
        }
    }
}
