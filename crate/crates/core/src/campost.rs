//! CAM normalization, teacher/student fusion, thresholding and boxes.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{MaskVolume, Volume};
use crate::metrics::BBox;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PostConfig {
    pub threshold: f64,
    /// Minimum component size, in patch cells.
    pub min_area: usize,
}

impl Default for PostConfig {
    fn default() -> Self {
        Self {
            threshold: 0.5,
            min_area: 1,
        }
    }
}

impl PostConfig {
    pub fn violations(&self) -> Vec<String> {
        if self.threshold > 0.0 && self.threshold < 1.0 {
            Vec::new()
        } else {
            vec![format!("post.threshold: {} is outside (0, 1)", self.threshold)]
        }
    }
}

/// CAM with every class channel scaled into `[0, 1]` per clip.
#[derive(Clone, Debug, PartialEq)]
pub struct NormalizedCam(Volume);

impl NormalizedCam {
    pub fn volume(&self) -> &Volume {
        &self.0
    }

    pub fn into_volume(self) -> Volume {
        self.0
    }
}

/// ReLU, then divide each class by its clip-wide maximum. All-zero channels
/// stay zero.
pub fn normalize_cam(cam: &Volume) -> NormalizedCam {
    let n = cam.c();
    let mut out = cam.map(|&v| v.max(0.0));
    let mut maxes = vec![0.0f64; n];
    for (i, v) in out.data().iter().enumerate() {
        let m = &mut maxes[i % n];
        if *v > *m {
            *m = *v;
        }
    }
    for (i, v) in out.data_mut().iter_mut().enumerate() {
        let m = maxes[i % n];
        if m > 0.0 {
            *v /= m;
        }
    }
    NormalizedCam(out)
}

/// Elementwise mean of two normalized CAMs, renormalized per class.
pub fn fuse_cams(teacher: &NormalizedCam, student: &NormalizedCam) -> Result<NormalizedCam> {
    student.0.ensure_dims(teacher.0.dims(), "fused CAMs")?;
    let data = teacher
        .0
        .data()
        .iter()
        .zip(student.0.data())
        .map(|(a, b)| (a + b) / 2.0)
        .collect();
    Ok(normalize_cam(&Volume::from_vec(teacher.0.dims(), data)?))
}

/// `cam > threshold`, elementwise.
pub fn binarize(cam: &NormalizedCam, threshold: f64) -> Result<MaskVolume> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::range(format!("threshold {threshold} is outside (0, 1)")));
    }
    Ok(cam.0.map(|&v| v > threshold))
}

/// Nearest-neighbour block replication of the spatial axes to `(W, H)`.
pub fn upsample_mask(mask: &MaskVolume, width: usize, height: usize) -> Result<MaskVolume> {
    let [w, h, d, n] = mask.dims();
    if w == 0 || h == 0 || !width.is_multiple_of(w) || !height.is_multiple_of(h) {
        return Err(Error::shape(format!(
            "cannot block-upsample {w}x{h} to {width}x{height}"
        )));
    }
    let (sx, sy) = (width / w, height / h);
    Ok(MaskVolume::from_fn([width, height, d, n], |x, y, t, c| {
        *mask.get(x / sx, y / sy, t, c)
    }))
}

/// Block-majority downsampling (strictly more than half the block set).
pub fn downsample_mask_majority(mask: &MaskVolume, w: usize, h: usize) -> Result<MaskVolume> {
    let [width, height, d, n] = mask.dims();
    if w == 0 || h == 0 || width % w != 0 || height % h != 0 {
        return Err(Error::shape(format!(
            "cannot block-downsample {width}x{height} to {w}x{h}"
        )));
    }
    let (sx, sy) = (width / w, height / h);
    Ok(MaskVolume::from_fn([w, h, d, n], |x, y, t, c| {
        let mut on = 0;
        for yy in 0..sy {
            for xx in 0..sx {
                on += *mask.get(x * sx + xx, y * sy + yy, t, c) as usize;
            }
        }
        2 * on > sx * sy
    }))
}

/// Tight boxes around 8-connected components of a single-frame mask
/// (`[W, H, 1, 1]`), dropping components with fewer than `min_area` pixels.
/// Components are reported in raster order of their first pixel.
pub fn extract_boxes(mask: &MaskVolume, min_area: usize) -> Result<Vec<BBox>> {
    let [w, h, d, c] = mask.dims();
    if d != 1 || c != 1 {
        return Err(Error::shape(format!("box extraction needs one frame, got {:?}", mask.dims())));
    }
    let data = mask.data();
    let mut seen = vec![false; w * h];
    let mut boxes = Vec::new();
    let mut stack = Vec::new();
    for start in 0..w * h {
        if !data[start] || seen[start] {
            continue;
        }
        seen[start] = true;
        stack.push(start);
        let (mut x0, mut y0, mut x1, mut y1, mut area) = (usize::MAX, usize::MAX, 0, 0, 0);
        while let Some(i) = stack.pop() {
            let (x, y) = (i % w, i / w);
            area += 1;
            x0 = x0.min(x);
            y0 = y0.min(y);
            x1 = x1.max(x + 1);
            y1 = y1.max(y + 1);
            for dy in -1isize..=1 {
                for dx in -1isize..=1 {
                    let (nx, ny) = (x as isize + dx, y as isize + dy);
                    if nx < 0 || ny < 0 || nx >= w as isize || ny >= h as isize {
                        continue;
                    }
                    let j = ny as usize * w + nx as usize;
                    if data[j] && !seen[j] {
                        seen[j] = true;
                        stack.push(j);
                    }
                }
            }
        }
        if area >= min_area {
            boxes.push(BBox::new(x0, y0, x1, y1));
        }
    }
    Ok(boxes)
}

/// RGB overlay for frame `t`, class `class`: the frame darkened, a red heat
/// layer from the (block-upsampled) normalized CAM, and the mask outline in
/// white. Returns a `[W, H, 1, 3]` volume.
pub fn render_overlay(frames: &Volume, cam: &NormalizedCam, mask: &MaskVolume, t: usize, class: usize) -> Result<Volume> {
    let [w, h, d, ch] = frames.dims();
    let c = cam.volume();
    if t >= d || class >= c.c() || c.w() == 0 || w % c.w() != 0 || h % c.h() != 0 {
        return Err(Error::shape(format!(
            "overlay of frame {t}, class {class} on frames {:?} with CAM {:?}",
            frames.dims(),
            c.dims()
        )));
    }
    mask.ensure_dims([w, h, d, c.c()], "overlay mask")?;
    let (sx, sy) = (w / c.w(), h / c.h());
    let on = |x: isize, y: isize| x >= 0 && y >= 0 && (x as usize) < w && (y as usize) < h && *mask.get(x as usize, y as usize, t, class);
    Ok(Volume::from_fn([w, h, 1, 3], |x, y, _, k| {
        let (xi, yi) = (x as isize, y as isize);
        if on(xi, yi) && !(on(xi - 1, yi) && on(xi + 1, yi) && on(xi, yi - 1) && on(xi, yi + 1)) {
            return 1.0;
        }
        let base = 0.6 * *frames.get(x, y, t, if ch == 1 { 0 } else { k });
        let heat = *c.get(x / sx, y / sy, t, class);
        if k == 0 {
            (base + 0.6 * heat).min(1.0)
        } else {
            base * (1.0 - 0.5 * heat)
        }
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn frame_mask(w: usize, h: usize, f: impl Fn(usize, usize) -> bool) -> MaskVolume {
        MaskVolume::from_fn([w, h, 1, 1], |x, y, _, _| f(x, y))
    }

    #[test]
    fn normalize_examples() {
        let cam = Volume::from_vec([2, 1, 1, 2], vec![4.0, 0.0, 2.0, 0.0]).unwrap();
        let n = normalize_cam(&cam);
        assert_eq!(n.volume().data(), &[1.0, 0.0, 0.5, 0.0]);
        let already = Volume::from_vec([3, 1, 1, 1], vec![0.25, 1.0, 0.0]).unwrap();
        assert_eq!(normalize_cam(&already).volume(), &already);
        let neg = Volume::from_vec([2, 1, 1, 1], vec![-3.0, 1.5]).unwrap();
        assert_eq!(normalize_cam(&neg).volume().data(), &[0.0, 1.0]);
    }

    #[test]
    fn fusion_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = normalize_cam(&Volume::from_fn([3, 3, 2, 2], |_, _, _, _| rng.random::<f64>()));
        let b = normalize_cam(&Volume::from_fn([3, 3, 2, 2], |_, _, _, _| rng.random::<f64>()));
        assert_eq!(fuse_cams(&a, &a).unwrap(), a);
        let zero = normalize_cam(&Volume::zeros([3, 3, 2, 2]));
        assert_eq!(fuse_cams(&a, &zero).unwrap(), a);
        let fused = fuse_cams(&a, &b).unwrap();
        // Oracle: elementwise mean, then divide by each class maximum.
        let mean: Vec<f64> = a.volume().data().iter().zip(b.volume().data()).map(|(x, y)| (x + y) / 2.0).collect();
        for n in 0..2 {
            let m = mean.iter().skip(n).step_by(2).copied().fold(0.0, f64::max);
            for (i, v) in mean.iter().enumerate().skip(n).step_by(2) {
                assert!((fused.volume().data()[i] - v / m).abs() < 1e-15);
            }
        }
        assert!(fuse_cams(&a, &normalize_cam(&Volume::zeros([3, 3, 1, 2]))).is_err());
    }

    #[test]
    fn binarize_examples() {
        let half = normalize_cam(&Volume::from_vec([2, 1, 1, 1], vec![0.5, 1.0]).unwrap());
        assert_eq!(binarize(&half, 0.5).unwrap().data(), &[false, true]);
        let ones = normalize_cam(&Volume::filled([2, 2, 2, 1], 1.0));
        assert!(binarize(&ones, 0.9).unwrap().data().iter().all(|&b| b));
        assert!(binarize(&ones, 0.0).is_err());
        assert!(binarize(&ones, 1.0).is_err());
    }

    #[test]
    fn upsample_examples() {
        let m = MaskVolume::from_vec([2, 2, 1, 1], vec![true, false, false, true]).unwrap();
        let up = upsample_mask(&m, 4, 4).unwrap();
        for y in 0..4 {
            for x in 0..4 {
                assert_eq!(*up.get(x, y, 0, 0), (x < 2) == (y < 2));
            }
        }
        assert_eq!(up.count(), 4 * m.count());
        let off = MaskVolume::zeros([2, 2, 1, 1]);
        assert_eq!(upsample_mask(&off, 6, 6).unwrap().count(), 0);
        assert!(upsample_mask(&m, 5, 4).is_err());
    }

    #[test]
    fn box_examples() {
        let rect = frame_mask(10, 10, |x, y| (2..5).contains(&x) && (3..7).contains(&y));
        assert_eq!(extract_boxes(&rect, 1).unwrap(), vec![BBox::new(2, 3, 5, 7)]);
        assert!(extract_boxes(&frame_mask(5, 5, |_, _| false), 1).unwrap().is_empty());
        let two = frame_mask(10, 10, |x, y| (x < 2 && y < 2) || (x >= 6 && y >= 5 && x < 9));
        assert_eq!(
            extract_boxes(&two, 1).unwrap(),
            vec![BBox::new(0, 0, 2, 2), BBox::new(6, 5, 9, 10)]
        );
        // Diagonal neighbours join under 8-connectivity.
        let diag = frame_mask(4, 4, |x, y| x == y);
        assert_eq!(extract_boxes(&diag, 1).unwrap(), vec![BBox::new(0, 0, 4, 4)]);
        assert!(extract_boxes(&diag, 5).unwrap().is_empty());
    }

    /// Independent flood fill with an explicit queue and 4+4 neighbour lists.
    fn flood_oracle(m: &MaskVolume) -> Vec<BBox> {
        let (w, h) = (m.w(), m.h());
        let mut label = vec![usize::MAX; w * h];
        let mut out = vec![];
        for y in 0..h {
            for x in 0..w {
                if !*m.get(x, y, 0, 0) || label[y * w + x] != usize::MAX {
                    continue;
                }
                let id = out.len();
                let mut q = std::collections::VecDeque::from([(x, y)]);
                label[y * w + x] = id;
                let mut b = BBox::new(x, y, x + 1, y + 1);
                while let Some((cx, cy)) = q.pop_front() {
                    b = BBox::new(b.x0.min(cx), b.y0.min(cy), b.x1.max(cx + 1), b.y1.max(cy + 1));
                    for (nx, ny) in [
                        (cx.wrapping_sub(1), cy), (cx + 1, cy), (cx, cy.wrapping_sub(1)), (cx, cy + 1),
                        (cx.wrapping_sub(1), cy.wrapping_sub(1)), (cx + 1, cy + 1),
                        (cx.wrapping_sub(1), cy + 1), (cx + 1, cy.wrapping_sub(1)),
                    ] {
                        if nx < w && ny < h && *m.get(nx, ny, 0, 0) && label[ny * w + nx] == usize::MAX {
                            label[ny * w + nx] = id;
                            q.push_back((nx, ny));
                        }
                    }
                }
                out.push(b);
            }
        }
        out
    }

    proptest! {
        #[test]
        fn boxes_match_flood_fill(bits in proptest::collection::vec(prop::bool::weighted(0.3), 64)) {
            let m = MaskVolume::from_vec([8, 8, 1, 1], bits).unwrap();
            prop_assert_eq!(extract_boxes(&m, 1).unwrap(), flood_oracle(&m));
        }

        #[test]
        fn masks_invariant_to_positive_scale(data in proptest::collection::vec(-1.0f64..1.0, 24), scale in 0.01f64..100.0) {
            let cam = Volume::from_vec([2, 3, 2, 2], data).unwrap();
            let scaled = cam.map(|v| v * scale);
            prop_assert_eq!(
                binarize(&normalize_cam(&cam), 0.5).unwrap(),
                binarize(&normalize_cam(&scaled), 0.5).unwrap()
            );
        }

        #[test]
        fn normalization_keeps_argmax(data in proptest::collection::vec(-1.0f64..1.0, 18)) {
            let cam = Volume::from_vec([3, 3, 2, 1], data).unwrap();
            let relu = cam.map(|v| v.max(0.0));
            let norm = normalize_cam(&cam);
            let argmax = |v: &Volume| v.data().iter().enumerate().fold((0, f64::NEG_INFINITY), |a, (i, &x)| if x > a.1 { (i, x) } else { a }).0;
            if relu.max_value() > 0.0 {
                prop_assert_eq!(argmax(&relu), argmax(norm.volume()));
            }
        }

        #[test]
        fn upsample_then_majority_roundtrip(bits in proptest::collection::vec(any::<bool>(), 2 * 3 * 2), factor in 1usize..4) {
            let m = MaskVolume::from_vec([2, 3, 2, 1], bits).unwrap();
            let up = upsample_mask(&m, 2 * factor, 3 * factor).unwrap();
            prop_assert_eq!(up.count(), m.count() * factor * factor);
            prop_assert_eq!(downsample_mask_majority(&up, 2, 3).unwrap(), m);
        }
    }

    #[test]
    fn overlay_outlines_the_mask() {
        let frames = Volume::filled([8, 8, 1, 3], 0.5);
        let cam = normalize_cam(&Volume::from_fn([2, 2, 1, 1], |x, y, _, _| (x + y) as f64));
        let mask = upsample_mask(&binarize(&cam, 0.5).unwrap(), 8, 8).unwrap();
        let img = render_overlay(&frames, &cam, &mask, 0, 0).unwrap();
        assert_eq!(img.dims(), [8, 8, 1, 3]);
        // Boundary of the lit 4x4 block is white, its interior is red-tinted.
        assert_eq!(*img.get(4, 4, 0, 1), 1.0);
        assert!(*img.get(6, 6, 0, 0) > *img.get(6, 6, 0, 1));
        assert_eq!(*img.get(0, 0, 0, 0), 0.3);
        assert!(render_overlay(&frames, &cam, &mask, 1, 0).is_err());
    }
}
