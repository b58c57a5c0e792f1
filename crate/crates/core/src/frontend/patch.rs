use super::{FrameParams, MelSpec, PipelineTag};
use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Non-overlapping k×k patches, row-major over the `(T/k, F/k)` grid with time
/// as the slow axis. Each patch is flattened row-major (time rows, bin columns).
#[derive(Clone, Debug, PartialEq)]
pub struct PatchSequence {
    pub patches: Tensor,
    pub grid: (usize, usize),
    pub k: usize,
    /// Zero frames appended at the end of the time axis.
    pub pad_frames: usize,
    pub tag: PipelineTag,
    pub frame: FrameParams,
}

impl PatchSequence {
    pub fn len(&self) -> usize {
        self.grid.0 * self.grid.1
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

pub fn patchify(mel: &MelSpec, k: usize) -> Result<PatchSequence> {
    if k == 0 {
        return Err(Error::Param("patch size must be positive".into()));
    }
    let (t, f) = mel.values.dims2("patchify")?;
    if f % k != 0 {
        return Err(Error::Param(format!("{f} mel bins is not a multiple of patch size {k}")));
    }
    let rows = t.div_ceil(k);
    let cols = f / k;
    let pad_frames = rows * k - t;
    let v = mel.values.data();
    let mut out = Vec::with_capacity(rows * cols * k * k);
    for gr in 0..rows {
        for gc in 0..cols {
            for i in 0..k {
                let ti = gr * k + i;
                for j in 0..k {
                    out.push(if ti < t { v[ti * f + gc * k + j] } else { 0.0 });
                }
            }
        }
    }
    Ok(PatchSequence {
        patches: Tensor::matrix(rows * cols, k * k, out)?,
        grid: (rows, cols),
        k,
        pad_frames,
        tag: mel.tag.clone(),
        frame: mel.frame,
    })
}

/// Inverse of [`patchify`], dropping the time padding.
pub fn unpatchify(p: &PatchSequence) -> Result<MelSpec> {
    let (rows, cols) = p.grid;
    let k = p.k;
    if p.patches.shape() != [rows * cols, k * k] {
        return Err(Error::shape(
            "unpatchify",
            format!("patches {:?} for grid {:?} with k={k}", p.patches.shape(), p.grid),
        ));
    }
    let f = cols * k;
    let t = rows * k - p.pad_frames;
    let mut out = vec![0.0; t * f];
    let d = p.patches.data();
    for gr in 0..rows {
        for gc in 0..cols {
            let base = (gr * cols + gc) * k * k;
            for i in 0..k {
                let ti = gr * k + i;
                if ti >= t {
                    break;
                }
                out[ti * f + gc * k..ti * f + gc * k + k].copy_from_slice(&d[base + i * k..base + i * k + k]);
            }
        }
    }
    Ok(MelSpec {
        values: Tensor::matrix(t, f, out)?,
        tag: p.tag.clone(),
        frame: p.frame,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::frontend::MelConfig;

    fn spec(t: usize, f: usize) -> MelSpec {
        MelSpec {
            values: Tensor::matrix(t, f, (0..t * f).map(|i| (i as f64 * 0.37).sin()).collect()).unwrap(),
            tag: PipelineTag::Modern,
            frame: MelConfig::default().frame_params(16_000),
        }
    }

    #[test]
    fn single_patch_is_flattened_matrix() {
        let m = spec(4, 4);
        let p = patchify(&m, 4).unwrap();
        assert_eq!(p.grid, (1, 1));
        assert_eq!(p.patches.data(), m.values.data());
    }

    #[test]
    fn canonical_grid() {
        let p = patchify(&spec(1024, 128), 16).unwrap();
        assert_eq!(p.len(), 512);
        assert_eq!(p.grid, (64, 8));
        assert_eq!(p.pad_frames, 0);
    }

    #[test]
    fn time_major_order_and_padding() {
        let p = patchify(&spec(998, 128), 16).unwrap();
        assert_eq!(p.grid, (63, 8));
        assert_eq!(p.pad_frames, 10);
        let m = spec(998, 128);
        // patch 1 is the second frequency block of the first time block
        assert_eq!(p.patches.get2(1, 0), m.values.get2(0, 16));
        assert_eq!(p.patches.get2(8, 0), m.values.get2(16, 0));
        assert_eq!(unpatchify(&p).unwrap(), m);
    }

    #[test]
    fn bad_sizes() {
        assert!(matches!(patchify(&spec(16, 16), 0), Err(Error::Param(_))));
        assert!(matches!(patchify(&spec(16, 20), 16), Err(Error::Param(_))));
    }
}
