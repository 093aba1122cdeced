//! Run-length mask encoding used on the segmenter wire.
//!
//! Runs are row-major and alternate background/foreground, starting with
//! background (so a mask whose first pixel is set starts with a 0 run).

use crate::model::{ImageGeometry, MaskGrid};

pub fn encode_rle(mask: &MaskGrid) -> Vec<u32> {
    let g = mask.geometry();
    let w = u64::from(g.width_px());
    let total = g.pixel_count() as u64;
    let mut runs = Vec::new();
    // `pos` is the first pixel not yet covered by a run; `on` whether the
    // open run is foreground.
    let mut pos = 0u64;
    let mut run_start = 0u64;
    let mut on = false;
    for (x, y) in mask.iter_set() {
        let i = u64::from(y) * w + u64::from(x);
        if on && i == pos {
            pos += 1;
            continue;
        }
        if on {
            runs.push((pos - run_start) as u32);
            run_start = pos;
        }
        runs.push((i - run_start) as u32);
        run_start = i;
        pos = i + 1;
        on = true;
    }
    if on {
        runs.push((pos - run_start) as u32);
        run_start = pos;
    }
    if run_start < total || runs.is_empty() {
        runs.push((total - run_start) as u32);
    }
    runs
}

pub fn decode_rle(runs: &[u32], rows: u32, cols: u32) -> Result<MaskGrid, String> {
    let g = ImageGeometry::new(cols, rows).map_err(|e| e.to_string())?;
    let total: u64 = runs.iter().map(|&r| u64::from(r)).sum();
    if total != g.pixel_count() as u64 {
        return Err(format!("runs cover {total} pixels, mask has {}", g.pixel_count()));
    }
    let mut m = MaskGrid::new(g);
    let w = u64::from(cols);
    let mut pos = 0u64;
    for (k, &r) in runs.iter().enumerate() {
        if k % 2 == 1 {
            for i in pos..pos + u64::from(r) {
                m.set((i % w) as u32, (i / w) as u32, true);
            }
        }
        pos += u64::from(r);
    }
    Ok(m)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn grid(w: u32, h: u32, on: &[usize]) -> MaskGrid {
        let mut m = MaskGrid::new(ImageGeometry::new(w, h).unwrap());
        for &i in on {
            m.set(i as u32 % w, i as u32 / w, true);
        }
        m
    }

    #[test]
    fn known_encodings() {
        assert_eq!(encode_rle(&grid(3, 2, &[])), vec![6]);
        assert_eq!(encode_rle(&grid(3, 2, &[0, 1])), vec![0, 2, 4]);
        assert_eq!(encode_rle(&grid(3, 2, &[2, 3])), vec![2, 2, 2]);
        assert_eq!(encode_rle(&grid(3, 2, &[5])), vec![5, 1]);
        assert_eq!(encode_rle(&grid(3, 2, &[0, 1, 2, 3, 4, 5])), vec![0, 6]);
        assert_eq!(encode_rle(&grid(3, 2, &[1, 4])), vec![1, 1, 2, 1, 1]);
    }

    #[test]
    fn decode_checks_total() {
        assert!(decode_rle(&[5], 2, 3).is_err());
        assert_eq!(decode_rle(&[1, 1, 2, 1, 1], 2, 3).unwrap(), grid(3, 2, &[1, 4]));
    }

    proptest! {
        #[test]
        fn round_trip(w in 1u32..20, h in 1u32..20, bits in proptest::collection::vec(any::<bool>(), 400)) {
            let on: Vec<usize> = (0..(w * h) as usize).filter(|&i| bits[i]).collect();
            let m = grid(w, h, &on);
            let runs = encode_rle(&m);
            prop_assert_eq!(runs.iter().map(|&r| r as usize).sum::<usize>(), (w * h) as usize);
            prop_assert_eq!(decode_rle(&runs, h, w).unwrap(), m);
        }
    }
}
