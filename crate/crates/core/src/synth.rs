//! Synthetic defect images, patch tiling, and stratified pool construction
//! with a controlled faulty fraction.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::index::sample;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{
    read_image, read_mask, save_manifest, write_image, write_mask, DataError, DatasetManifest, ManifestEntry,
    PatchId, Role,
};
use crate::scalar::round_count;
use crate::seed::{mix, rng_from, SeedPurpose};

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid synthetic config: {0}")]
    InvalidConfig(String),
    #[error("cannot write {path}: {source}")]
    Unwritable { path: PathBuf, source: std::io::Error },
    #[error("record {id}: {h}x{w} image is not divisible into {ph}x{pw} patches")]
    NonDivisible { id: PatchId, h: usize, w: usize, ph: usize, pw: usize },
    #[error("invalid pool spec: {0}")]
    InvalidSpec(String),
    #[error("insufficient records: {}", describe_shortfall(.0))]
    Insufficient(Vec<Shortfall>),
    #[error(transparent)]
    Data(#[from] DataError),
}

/// Missing records in one stratum.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Shortfall {
    pub stratum: &'static str,
    pub needed: usize,
    pub available: usize,
}

fn describe_shortfall(s: &[Shortfall]) -> String {
    s.iter()
        .map(|s| format!("{} stratum needs {}, has {} (short by {})", s.stratum, s.needed, s.available, s.needed - s.available))
        .collect::<Vec<_>>()
        .join("; ")
}

/// Parameters of the synthetic defect-image generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub n_images: usize,
    pub height: usize,
    pub width: usize,
    pub defect_probability: f64,
    /// Inclusive range of blob counts for a defective image.
    pub defect_count_range: (usize, usize),
    /// Inclusive range of ellipse semi-axes, in pixels.
    pub defect_radius_range: (f64, f64),
    pub background_noise_sd: f64,
    pub defect_contrast: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_images: 600,
            height: 64,
            width: 64,
            defect_probability: 0.6,
            defect_count_range: (1, 3),
            defect_radius_range: (4.0, 10.0),
            background_noise_sd: 0.06,
            defect_contrast: 0.10,
            seed: 42,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: &str| Err(SynthError::InvalidConfig(m.to_string()));
        let (kmin, kmax) = self.defect_count_range;
        let (rmin, rmax) = self.defect_radius_range;
        if self.n_images == 0 || self.height == 0 || self.width == 0 {
            return bad("n_images, height and width must be positive");
        }
        if !(0.0..=1.0).contains(&self.defect_probability) {
            return bad("defect_probability must lie in [0, 1]");
        }
        if kmin > kmax {
            return bad("defect_count_range is empty");
        }
        if !(rmin > 0.0 && rmin <= rmax) {
            return bad("defect_radius_range must be a nonempty positive interval");
        }
        if 2.0 * rmax > self.height.min(self.width) as f64 {
            return bad("defect radius larger than image");
        }
        if !(self.background_noise_sd >= 0.0 && self.background_noise_sd.is_finite()) {
            return bad("background_noise_sd must be finite and non-negative");
        }
        if !(self.defect_contrast > 0.0 && self.defect_contrast <= 1.0) {
            return bad("defect_contrast must lie in (0, 1]");
        }
        Ok(())
    }
}

/// One rendered synthetic image.
#[derive(Debug, Clone)]
pub struct SynthImage {
    pub image: Vec<f32>,
    pub mask: Vec<u8>,
    pub blobs: usize,
}

/// Renders image `index`. Depends only on `(config, index)`.
pub fn render_synthetic(config: &SynthConfig, index: usize) -> SynthImage {
    let (h, w) = (config.height, config.width);
    let mut rng = rng_from(mix(mix(config.seed, SeedPurpose::Synthesis as u64), index as u64));
    let mut image: Vec<f32> = (0..h * w)
        .map(|_| {
            let z: f64 = StandardNormal.sample(&mut rng);
            (0.5 + config.background_noise_sd * z).clamp(0.0, 1.0) as f32
        })
        .collect();
    let mut mask = vec![0u8; h * w];

    let defective = rng.random::<f64>() < config.defect_probability;
    let blobs = if defective {
        let (kmin, kmax) = config.defect_count_range;
        rng.random_range(kmin..=kmax)
    } else {
        0
    };
    let (rmin, rmax) = config.defect_radius_range;
    for _ in 0..blobs {
        let cy = rng.random_range(0..h) as f64;
        let cx = rng.random_range(0..w) as f64;
        let ry = rng.random_range(rmin..=rmax);
        let rx = rng.random_range(rmin..=rmax);
        let theta = rng.random_range(0.0..std::f64::consts::PI);
        let (s, c) = theta.sin_cos();
        let reach = rmax.ceil() as isize;
        for y in (cy as isize - reach).max(0)..(cy as isize + reach + 1).min(h as isize) {
            for x in (cx as isize - reach).max(0)..(cx as isize + reach + 1).min(w as isize) {
                let (dy, dx) = (y as f64 - cy, x as f64 - cx);
                let u = (dx * c + dy * s) / rx;
                let v = (-dx * s + dy * c) / ry;
                if u * u + v * v <= 1.0 {
                    mask[y as usize * w + x as usize] = 1;
                }
            }
        }
    }
    let shift = config.defect_contrast as f32;
    for (px, &m) in image.iter_mut().zip(&mask) {
        if m == 1 {
            *px = (*px - shift).clamp(0.0, 1.0);
        }
    }
    SynthImage { image, mask, blobs }
}

fn create_dir(path: &Path) -> Result<(), SynthError> {
    fs::create_dir_all(path).map_err(|source| SynthError::Unwritable { path: path.to_path_buf(), source })
}

fn unwritable(err: DataError) -> SynthError {
    match err {
        DataError::Io { path, source } => SynthError::Unwritable { path, source },
        other => SynthError::Data(other),
    }
}

/// Generates `config.n_images` grayscale images with masks under `out_dir`
/// and writes `out_dir/manifest.json`.
pub fn generate_synthetic(config: &SynthConfig, out_dir: &Path) -> Result<DatasetManifest, SynthError> {
    config.validate()?;
    let (out_dir, img_dir, mask_dir) = prepare_out_dir(out_dir)?;
    let entries = (0..config.n_images)
        .into_par_iter()
        .map(|i| {
            let rendered = render_synthetic(config, i);
            let image = img_dir.join(format!("img_{i:06}.png"));
            let mask = mask_dir.join(format!("mask_{i:06}.png"));
            write_image(&image, 1, config.height, config.width, &rendered.image).map_err(unwritable)?;
            write_mask(&mask, config.height, config.width, &rendered.mask).map_err(unwritable)?;
            Ok(ManifestEntry { id: i as PatchId, image, mask, faulty: rendered.mask.contains(&1) })
        })
        .collect::<Result<Vec<_>, SynthError>>()?;
    finish(Role::Pool, entries, &out_dir)
}

fn finish(role: Role, entries: Vec<ManifestEntry>, out_dir: &Path) -> Result<DatasetManifest, SynthError> {
    let manifest = DatasetManifest::new(role, entries)?;
    save_manifest(&manifest, &out_dir.join("manifest.json")).map_err(unwritable)?;
    Ok(manifest)
}

fn prepare_out_dir(out_dir: &Path) -> Result<(PathBuf, PathBuf, PathBuf), SynthError> {
    create_dir(out_dir)?;
    let out_dir = out_dir
        .canonicalize()
        .map_err(|source| SynthError::Unwritable { path: out_dir.to_path_buf(), source })?;
    let (img_dir, mask_dir) = (out_dir.join("images"), out_dir.join("masks"));
    create_dir(&img_dir)?;
    create_dir(&mask_dir)?;
    Ok((out_dir, img_dir, mask_dir))
}

/// Tiles every record into non-overlapping `patch_h × patch_w` patches.
///
/// Patch ids are assigned consecutively in `(source id, row, col)` order;
/// file names also carry the source id and tile position.
pub fn patchify(
    manifest: &DatasetManifest,
    patch_h: usize,
    patch_w: usize,
    out_dir: &Path,
) -> Result<DatasetManifest, SynthError> {
    if patch_h == 0 || patch_w == 0 {
        return Err(SynthError::InvalidConfig("patch dimensions must be positive".into()));
    }
    // Pass 1: dimensions only, to assign ids before any pixel work.
    let dims = manifest
        .entries()
        .par_iter()
        .map(|e| {
            let (w, h) = image::image_dimensions(&e.image).map_err(|err| DataError::Decode {
                path: e.image.clone(),
                reason: err.to_string(),
            })?;
            let (h, w) = (h as usize, w as usize);
            if h % patch_h != 0 || w % patch_w != 0 {
                return Err(SynthError::NonDivisible { id: e.id, h, w, ph: patch_h, pw: patch_w });
            }
            Ok((h / patch_h, w / patch_w))
        })
        .collect::<Result<Vec<_>, SynthError>>()?;
    let mut offsets = Vec::with_capacity(dims.len());
    let mut next: PatchId = 0;
    for (rows, cols) in &dims {
        offsets.push(next);
        next += (rows * cols) as PatchId;
    }

    let (out_dir, img_dir, mask_dir) = prepare_out_dir(out_dir)?;
    let entries = manifest
        .entries()
        .par_iter()
        .zip(offsets.par_iter().zip(dims.par_iter()))
        .map(|(entry, (&offset, &(rows, cols)))| {
            let (channels, h, w, image) = read_image(&entry.image)?;
            let (mh, mw, mask) = read_mask(&entry.mask)?;
            if (mh, mw) != (h, w) {
                return Err(DataError::ShapeMismatch { id: entry.id, image_hw: (h, w), mask_hw: (mh, mw) }.into());
            }
            let mut out = Vec::with_capacity(rows * cols);
            for r in 0..rows {
                for c in 0..cols {
                    let id = offset + (r * cols + c) as PatchId;
                    let mut tile = Vec::with_capacity(channels * patch_h * patch_w);
                    for ch in 0..channels {
                        for y in r * patch_h..(r + 1) * patch_h {
                            let row = ch * h * w + y * w;
                            tile.extend_from_slice(&image[row + c * patch_w..row + (c + 1) * patch_w]);
                        }
                    }
                    let mut tile_mask = Vec::with_capacity(patch_h * patch_w);
                    for y in r * patch_h..(r + 1) * patch_h {
                        tile_mask.extend_from_slice(&mask[y * w + c * patch_w..y * w + (c + 1) * patch_w]);
                    }
                    let stem = format!("p{id:07}_src{}_r{r}_c{c}", entry.id);
                    let image_path = img_dir.join(format!("{stem}.png"));
                    let mask_path = mask_dir.join(format!("{stem}.png"));
                    write_image(&image_path, channels, patch_h, patch_w, &tile).map_err(unwritable)?;
                    write_mask(&mask_path, patch_h, patch_w, &tile_mask).map_err(unwritable)?;
                    out.push(ManifestEntry { id, image: image_path, mask: mask_path, faulty: tile_mask.contains(&1) });
                }
            }
            Ok(out)
        })
        .collect::<Result<Vec<_>, SynthError>>()?;
    finish(manifest.role(), entries.into_iter().flatten().collect(), &out_dir)
}

/// Target composition of a pool or test manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoolSpec {
    pub target_faulty_fraction: f64,
    pub size: usize,
    pub seed: u64,
    pub role: Role,
}

impl PoolSpec {
    /// `(faulty, healthy)` record counts; the healthy stratum absorbs rounding.
    pub fn stratum_counts(&self) -> (usize, usize) {
        let faulty = round_count(self.size as f64 * self.target_faulty_fraction).min(self.size);
        (faulty, self.size - faulty)
    }

    fn validate(&self) -> Result<(), SynthError> {
        if !(0.0..=1.0).contains(&self.target_faulty_fraction) {
            return Err(SynthError::InvalidSpec(format!(
                "target faulty fraction {} outside [0, 1]",
                self.target_faulty_fraction
            )));
        }
        if self.size == 0 {
            return Err(SynthError::InvalidSpec("size must be positive".into()));
        }
        Ok(())
    }
}

fn strata<'a>(source: &'a DatasetManifest, exclude: &[PatchId]) -> (Vec<&'a ManifestEntry>, Vec<&'a ManifestEntry>) {
    source
        .entries()
        .iter()
        .filter(|e| exclude.binary_search(&e.id).is_err())
        .partition(|e| e.faulty)
}

fn check_demand(faulty: (usize, usize), healthy: (usize, usize)) -> Result<(), SynthError> {
    let mut short = Vec::new();
    if faulty.0 > faulty.1 {
        short.push(Shortfall { stratum: "faulty", needed: faulty.0, available: faulty.1 });
    }
    if healthy.0 > healthy.1 {
        short.push(Shortfall { stratum: "healthy", needed: healthy.0, available: healthy.1 });
    }
    if short.is_empty() {
        Ok(())
    } else {
        Err(SynthError::Insufficient(short))
    }
}

fn sample_pool(source: &DatasetManifest, spec: &PoolSpec, exclude: &[PatchId]) -> Result<DatasetManifest, SynthError> {
    spec.validate()?;
    let (faulty, healthy) = strata(source, exclude);
    let (nf, nh) = spec.stratum_counts();
    check_demand((nf, faulty.len()), (nh, healthy.len()))?;
    let mut rng = rng_from(spec.seed);
    let mut chosen: Vec<ManifestEntry> = Vec::with_capacity(spec.size);
    for (stratum, n) in [(&faulty, nf), (&healthy, nh)] {
        chosen.extend(sample(&mut rng, stratum.len(), n).into_iter().map(|i| stratum[i].clone()));
    }
    Ok(DatasetManifest::new(spec.role, chosen)?)
}

/// Stratified sample of `spec.size` records with exactly
/// `round(size × target)` faulty ones.
pub fn build_pool(source: &DatasetManifest, spec: &PoolSpec) -> Result<DatasetManifest, SynthError> {
    sample_pool(source, spec, &[])
}

/// Builds an id-disjoint pool and test set from one source. The pool is
/// drawn first; the test set is drawn from the remainder.
pub fn build_disjoint_pools(
    source: &DatasetManifest,
    pool_spec: &PoolSpec,
    test_spec: &PoolSpec,
) -> Result<(DatasetManifest, DatasetManifest), SynthError> {
    pool_spec.validate()?;
    test_spec.validate()?;
    let (faulty, healthy) = strata(source, &[]);
    let (pf, ph) = pool_spec.stratum_counts();
    let (tf, th) = test_spec.stratum_counts();
    check_demand((pf + tf, faulty.len()), (ph + th, healthy.len()))?;
    let pool = sample_pool(source, pool_spec, &[])?;
    let test = sample_pool(source, test_spec, &pool.ids())?;
    Ok((pool, test))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::load_manifest;
    use num_rational::Ratio;

    fn tiny(seed: u64) -> SynthConfig {
        SynthConfig { n_images: 12, height: 16, width: 16, defect_radius_range: (1.0, 3.0), seed, ..Default::default() }
    }

    fn fake_source(n_faulty: usize, n_healthy: usize) -> DatasetManifest {
        let entries = (0..n_faulty + n_healthy)
            .map(|i| ManifestEntry {
                id: (i * 3) as PatchId,
                image: PathBuf::from(format!("/x/{i}.png")),
                mask: PathBuf::from(format!("/x/m{i}.png")),
                faulty: i < n_faulty,
            })
            .collect();
        DatasetManifest::new(Role::Pool, entries).unwrap()
    }

    #[test]
    fn probability_zero_gives_healthy_only() {
        let cfg = SynthConfig { defect_probability: 0.0, ..tiny(1) };
        assert!((0..cfg.n_images).all(|i| render_synthetic(&cfg, i).mask.iter().all(|&m| m == 0)));
    }

    #[test]
    fn probability_one_gives_faulty_only() {
        let cfg = SynthConfig { defect_probability: 1.0, defect_count_range: (1, 1), ..tiny(2) };
        for i in 0..cfg.n_images {
            let r = render_synthetic(&cfg, i);
            assert_eq!(r.blobs, 1);
            assert!(r.mask.contains(&1));
        }
    }

    #[test]
    fn defects_are_darker_than_background_on_average() {
        let cfg = SynthConfig { defect_probability: 1.0, background_noise_sd: 0.0, ..tiny(3) };
        let r = render_synthetic(&cfg, 0);
        for (v, m) in r.image.iter().zip(&r.mask) {
            let expect = if *m == 1 { 0.5 - cfg.defect_contrast } else { 0.5 };
            assert!((f64::from(*v) - expect).abs() < 1e-6);
        }
    }

    #[test]
    fn degenerate_configs_rejected() {
        assert!(SynthConfig { defect_radius_range: (1.0, 9.0), ..tiny(0) }.validate().is_err());
        assert!(SynthConfig { defect_count_range: (3, 1), ..tiny(0) }.validate().is_err());
        assert!(SynthConfig { defect_probability: 1.5, ..tiny(0) }.validate().is_err());
        assert!(SynthConfig { defect_contrast: 0.0, ..tiny(0) }.validate().is_err());
    }

    #[test]
    fn generation_is_byte_deterministic() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let cfg = tiny(42);
        generate_synthetic(&cfg, a.path()).unwrap();
        generate_synthetic(&cfg, b.path()).unwrap();
        for sub in ["manifest.json", "images/img_000003.png", "masks/mask_000007.png"] {
            assert_eq!(fs::read(a.path().join(sub)).unwrap(), fs::read(b.path().join(sub)).unwrap(), "{sub}");
        }
        let m = load_manifest(&a.path().join("manifest.json")).unwrap();
        assert_eq!(m.len(), 12);
        for e in m.entries() {
            let p = m.read_patch(e.id).unwrap();
            assert_eq!(p.faulty, p.mask.contains(&1));
        }
    }

    #[test]
    fn patchify_counts_and_cropping() {
        let dir = tempfile::tempdir().unwrap();
        let src = dir.path().join("src");
        fs::create_dir_all(&src).unwrap();
        // 512x512 with one defect pixel in the top-left quadrant.
        let mut mask = vec![0u8; 512 * 512];
        mask[10 * 512 + 20] = 1;
        write_image(&src.join("a.png"), 3, 512, 512, &vec![0.3; 3 * 512 * 512]).unwrap();
        write_mask(&src.join("a_m.png"), 512, 512, &mask).unwrap();
        // 256x1600 grayscale.
        write_image(&src.join("b.png"), 1, 256, 1600, &vec![0.7; 256 * 1600]).unwrap();
        write_mask(&src.join("b_m.png"), 256, 1600, &vec![0; 256 * 1600]).unwrap();
        let a = DatasetManifest::new(
            Role::Pool,
            vec![ManifestEntry { id: 0, image: src.join("a.png"), mask: src.join("a_m.png"), faulty: true }],
        )
        .unwrap();
        let b = DatasetManifest::new(
            Role::Pool,
            vec![ManifestEntry { id: 1, image: src.join("b.png"), mask: src.join("b_m.png"), faulty: false }],
        )
        .unwrap();

        let pa = patchify(&a, 256, 256, &dir.path().join("pa")).unwrap();
        assert_eq!(pa.len(), 4);
        assert_eq!(pa.faulty_count(), 1);
        assert!(pa.get(0).unwrap().faulty);
        let first = pa.read_patch(0).unwrap();
        assert_eq!((first.channels, first.height, first.width), (3, 256, 256));
        assert_eq!(first.mask[10 * 256 + 20], 1);

        let pb = patchify(&b, 256, 400, &dir.path().join("pb")).unwrap();
        assert_eq!(pb.len(), 4);
        assert_eq!(pb.ids(), vec![0, 1, 2, 3]);
        assert!(pb.entries()[3].image.to_string_lossy().contains("src1_r0_c3"));

        let err = patchify(&b, 256, 300, &dir.path().join("pc")).unwrap_err();
        assert!(matches!(err, SynthError::NonDivisible { id: 1, .. }), "{err}");
    }

    #[test]
    fn pool_of_4300_at_ten_percent() {
        let source = fake_source(1000, 5000);
        let spec = PoolSpec { target_faulty_fraction: 0.10, size: 4300, seed: 7, role: Role::Pool };
        assert_eq!(spec.stratum_counts(), (430, 3870));
        let pool = build_pool(&source, &spec).unwrap();
        assert_eq!(pool.len(), 4300);
        assert_eq!(pool.faulty_count(), 430);
        assert_eq!(pool.realized_faulty_fraction(), Ratio::new(430, 4300));
        assert_eq!(build_pool(&source, &spec).unwrap().ids(), pool.ids());
    }

    #[test]
    fn full_faulty_target() {
        let source = fake_source(50, 50);
        let pool = build_pool(&source, &PoolSpec { target_faulty_fraction: 1.0, size: 40, seed: 1, role: Role::Pool }).unwrap();
        assert!(pool.entries().iter().all(|e| e.faulty));
    }

    #[test]
    fn disjoint_pool_and_test() {
        let source = fake_source(150, 850);
        let pool_spec = PoolSpec { target_faulty_fraction: 0.5, size: 100, seed: 3, role: Role::Pool };
        let test_spec = PoolSpec { target_faulty_fraction: 0.05, size: 200, seed: 4, role: Role::Test };
        let (pool, test) = build_disjoint_pools(&source, &pool_spec, &test_spec).unwrap();
        assert_eq!(pool.realized_faulty_fraction(), Ratio::new(1, 2));
        assert_eq!(test.realized_faulty_fraction(), Ratio::new(1, 20));
        assert_eq!(test.role(), Role::Test);
        assert!(pool.ids().iter().all(|id| !test.contains(*id)));
    }

    #[test]
    fn excess_demand_reports_shortfall() {
        let source = fake_source(10, 20);
        let pool_spec = PoolSpec { target_faulty_fraction: 0.5, size: 16, seed: 3, role: Role::Pool };
        let test_spec = PoolSpec { target_faulty_fraction: 0.5, size: 16, seed: 4, role: Role::Test };
        match build_disjoint_pools(&source, &pool_spec, &test_spec) {
            Err(SynthError::Insufficient(s)) => {
                assert_eq!(s, vec![Shortfall { stratum: "faulty", needed: 16, available: 10 }]);
            }
            other => panic!("expected shortfall, got {other:?}"),
        }
        let err = build_pool(&source, &PoolSpec { target_faulty_fraction: 0.0, size: 25, seed: 0, role: Role::Pool })
            .unwrap_err();
        assert!(err.to_string().contains("healthy stratum needs 25, has 20"), "{err}");
    }
}
