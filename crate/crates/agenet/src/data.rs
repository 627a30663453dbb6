//! UTK-Face-style dataset ingestion: filename label parsing, age bucketing,
//! deterministic splitting and normalized batch loading.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use image::imageops::FilterType;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Gender {
    Male = 0,
    Female = 1,
}

impl Gender {
    pub fn label(self) -> usize {
        self as usize
    }
}

/// One dataset item parsed from a `age_gender_race_timestamp.jpg` filename.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SampleRecord {
    pub path: PathBuf,
    pub age_years: u32,
    pub gender: Gender,
    pub bucket: usize,
}

/// Decade-wide age buckets. Internal indices are 0-based; the display index
/// adds `display_offset` to match the paper's 1-based bucket numbering.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct BucketScheme {
    pub width_years: u32,
    pub num_buckets: usize,
    pub display_offset: usize,
}

impl Default for BucketScheme {
    fn default() -> Self {
        BucketScheme { width_years: 10, num_buckets: 11, display_offset: 1 }
    }
}

impl BucketScheme {
    /// Internal bucket index; ages past the last bucket clamp into it.
    pub fn bucket_of(&self, age_years: u32) -> usize {
        let max_age = self.width_years as usize * self.num_buckets - 1;
        (age_years as usize).min(max_age) / self.width_years as usize
    }

    pub fn display_index(&self, internal: usize) -> usize {
        internal + self.display_offset
    }

    /// Human-readable range label, e.g. internal index 2 -> "20-30".
    pub fn display_label(&self, internal: usize) -> String {
        let lo = internal as u32 * self.width_years;
        format!("{}-{}", lo, lo + self.width_years)
    }
}

/// Parses `age_gender_race_....ext` (gender 0 = male, 1 = female). The race
/// field is read for validation but not used.
pub fn parse_utk_filename(name: &str) -> Result<(u32, Gender)> {
    let stem = name.rsplit_once('.').map(|(s, _)| s).unwrap_or(name);
    let fields: Vec<&str> = stem.split('_').collect();
    if fields.len() < 3 {
        return Err(Error::Data(format!(
            "filename '{}' does not have age_gender_race fields",
            name
        )));
    }
    let age: u32 = fields[0]
        .parse()
        .map_err(|_| Error::Data(format!("filename '{}': bad age field '{}'", name, fields[0])))?;
    if !(1..=116).contains(&age) {
        return Err(Error::Data(format!("filename '{}': age {} out of range", name, age)));
    }
    let gender = match fields[1] {
        "0" => Gender::Male,
        "1" => Gender::Female,
        other => {
            return Err(Error::Data(format!("filename '{}': bad gender field '{}'", name, other)));
        }
    };
    let _race: u32 = fields[2]
        .parse()
        .map_err(|_| Error::Data(format!("filename '{}': bad race field '{}'", name, fields[2])))?;
    Ok((age, gender))
}

/// Dataset totals by gender and bucket; malformed names are counted, not fatal.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Census {
    pub total: usize,
    pub male: usize,
    pub female: usize,
    pub per_bucket: Vec<usize>,
    pub skipped: usize,
}

/// Scans a directory of images, parsing labels from filenames. Files that do
/// not parse are skipped with a warning on stderr.
pub fn scan_dataset(dir: &Path, scheme: &BucketScheme) -> Result<(Vec<SampleRecord>, Census)> {
    if !dir.is_dir() {
        return Err(Error::Data(format!("dataset directory '{}' not found", dir.display())));
    }
    let mut names: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| {
            p.is_file()
                && matches!(
                    p.extension().and_then(|e| e.to_str()).map(|e| e.to_ascii_lowercase()).as_deref(),
                    Some("jpg") | Some("jpeg") | Some("png") | Some("ppm") | Some("pgm")
                )
        })
        .collect();
    names.sort();
    let mut records = Vec::new();
    let mut census = Census {
        total: 0,
        male: 0,
        female: 0,
        per_bucket: vec![0; scheme.num_buckets],
        skipped: 0,
    };
    for path in names {
        let fname = path.file_name().and_then(|n| n.to_str()).unwrap_or("");
        match parse_utk_filename(fname) {
            Ok((age, gender)) => {
                let bucket = scheme.bucket_of(age);
                census.total += 1;
                match gender {
                    Gender::Male => census.male += 1,
                    Gender::Female => census.female += 1,
                }
                census.per_bucket[bucket] += 1;
                records.push(SampleRecord { path, age_years: age, gender, bucket });
            }
            Err(e) => {
                census.skipped += 1;
                eprintln!("warning: skipping {}: {}", path.display(), e);
            }
        }
    }
    if records.is_empty() {
        return Err(Error::Data(format!(
            "no usable images in '{}' ({} files skipped)",
            dir.display(),
            census.skipped
        )));
    }
    Ok((records, census))
}

/// 64-bit FNV-1a; the deterministic hash behind splitting and augmentation.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

fn mix(h: u64, seed: u64) -> u64 {
    // splitmix64 finalizer over hash xor seed
    let mut z = h ^ seed.wrapping_mul(0x9e3779b97f4a7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub train: Vec<SampleRecord>,
    pub val: Vec<SampleRecord>,
    pub test: Vec<SampleRecord>,
    pub seed: u64,
    pub ratios: (f64, f64, f64),
}

/// Partition assignment by hash of the filename mixed with the seed, so
/// membership is stable under record reordering and dataset growth.
pub fn split_dataset(records: &[SampleRecord], seed: u64, ratios: (f64, f64, f64)) -> Result<DatasetSplit> {
    let (r0, r1, r2) = ratios;
    if r0 < 0.0 || r1 < 0.0 || r2 < 0.0 || (r0 + r1 + r2 - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!("split ratios {:?} must be nonnegative and sum to 1", ratios)));
    }
    let mut split = DatasetSplit { train: Vec::new(), val: Vec::new(), test: Vec::new(), seed, ratios };
    for rec in records {
        let name = rec.path.file_name().and_then(|n| n.to_str()).unwrap_or("");
        let u = mix(fnv1a(name.as_bytes()), seed) as f64 / (u64::MAX as f64 + 1.0);
        if u < r0 {
            split.train.push(rec.clone());
        } else if u < r0 + r1 {
            split.val.push(rec.clone());
        } else {
            split.test.push(rec.clone());
        }
    }
    Ok(split)
}

/// Manifest written by `prepare`: file lists per partition.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SplitManifest {
    pub seed: u64,
    pub ratios: (f64, f64, f64),
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
}

impl SplitManifest {
    pub fn from_split(split: &DatasetSplit) -> SplitManifest {
        let names = |v: &[SampleRecord]| {
            v.iter()
                .map(|r| r.path.file_name().and_then(|n| n.to_str()).unwrap_or("").to_string())
                .collect()
        };
        SplitManifest {
            seed: split.seed,
            ratios: split.ratios,
            train: names(&split.train),
            val: names(&split.val),
            test: names(&split.test),
        }
    }
}

/// A decoded, normalized batch plus its labels.
pub struct Batch<S: Scalar> {
    pub images: Tensor<S>,
    pub gender_labels: Vec<usize>,
    pub bucket_labels: Vec<usize>,
    pub skipped: usize,
}

/// Decodes records into a [N,3,H,W] tensor: bilinear resize, scale to [0,1],
/// then normalize with mean 0.5 / std 0.5 per channel. Horizontal flips
/// (p = 0.5) are keyed by filename hash and `aug_seed`, never by arrival
/// order. Undecodable files are skipped with a warning.
pub fn load_batch<S: Scalar>(
    records: &[SampleRecord],
    target_hw: usize,
    augment: bool,
    aug_seed: u64,
) -> Result<Batch<S>> {
    let mut pixels: Vec<S> = Vec::with_capacity(records.len() * 3 * target_hw * target_hw);
    let mut gender_labels = Vec::new();
    let mut bucket_labels = Vec::new();
    let mut skipped = 0usize;
    for rec in records {
        let img = match image::open(&rec.path) {
            Ok(img) => img,
            Err(e) => {
                skipped += 1;
                eprintln!("warning: cannot decode {}: {}", rec.path.display(), e);
                continue;
            }
        };
        let rgb = image::imageops::resize(&img.to_rgb8(), target_hw as u32, target_hw as u32, FilterType::Triangle);
        let flip = if augment {
            let name = rec.path.file_name().and_then(|n| n.to_str()).unwrap_or("");
            mix(fnv1a(name.as_bytes()), aug_seed) & 1 == 1
        } else {
            false
        };
        for c in 0..3usize {
            for y in 0..target_hw {
                for x in 0..target_hw {
                    let sx = if flip { target_hw - 1 - x } else { x };
                    let v = rgb.get_pixel(sx as u32, y as u32)[c] as f64 / 255.0;
                    pixels.push(S::from_f64((v - 0.5) / 0.5));
                }
            }
        }
        gender_labels.push(rec.gender.label());
        bucket_labels.push(rec.bucket);
    }
    if gender_labels.is_empty() {
        return Err(Error::Data("no decodable images in batch".into()));
    }
    let n = gender_labels.len();
    Ok(Batch {
        images: Tensor::from_vec(&[n, 3, target_hw, target_hw], pixels)?,
        gender_labels,
        bucket_labels,
        skipped,
    })
}

/// Census per-bucket map with display labels, for the prepare report.
pub fn census_display(census: &Census, scheme: &BucketScheme) -> BTreeMap<String, usize> {
    census
        .per_bucket
        .iter()
        .enumerate()
        .map(|(i, &n)| (format!("{:02}:{}", scheme.display_index(i), scheme.display_label(i)), n))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_well_formed_names() {
        let (age, gender) = parse_utk_filename("25_0_2_20170116174525125.jpg").unwrap();
        assert_eq!(age, 25);
        assert_eq!(gender, Gender::Male);
        let (age, gender) = parse_utk_filename("1_1_0_x.jpg").unwrap();
        assert_eq!(age, 1);
        assert_eq!(gender, Gender::Female);
    }

    #[test]
    fn malformed_names_rejected() {
        assert!(parse_utk_filename("face.jpg").is_err());
        assert!(parse_utk_filename("abc_0_0_x.jpg").is_err());
        assert!(parse_utk_filename("25_2_0_x.jpg").is_err());
        assert!(parse_utk_filename("0_0_0_x.jpg").is_err());
    }

    #[test]
    fn paper_bucket_example_age_25() {
        let scheme = BucketScheme::default();
        let internal = scheme.bucket_of(25);
        assert_eq!(internal, 2);
        assert_eq!(scheme.display_index(internal), 3);
        assert_eq!(scheme.display_label(internal), "20-30");
    }

    #[test]
    fn bucket_boundaries_and_clamp() {
        let scheme = BucketScheme::default();
        assert_eq!(scheme.bucket_of(0), 0);
        assert_eq!(scheme.display_label(0), "0-10");
        assert_eq!(scheme.bucket_of(110), 10);
        assert_eq!(scheme.display_label(10), "100-110");
        assert_eq!(scheme.bucket_of(116), 10);
        // monotone nondecreasing
        let mut last = 0;
        for age in 0..=116 {
            let b = scheme.bucket_of(age);
            assert!(b >= last);
            last = b;
        }
    }

    fn fake_record(name: &str) -> SampleRecord {
        let (age, gender) = parse_utk_filename(name).unwrap();
        let scheme = BucketScheme::default();
        SampleRecord {
            path: PathBuf::from(name),
            age_years: age,
            gender,
            bucket: scheme.bucket_of(age),
        }
    }

    fn synthetic_records(n: usize) -> Vec<SampleRecord> {
        (0..n)
            .map(|i| fake_record(&format!("{}_{}_{}_{:08}.jpg", 1 + i % 99, i % 2, i % 5, i)))
            .collect()
    }

    #[test]
    fn all_train_ratio() {
        let records = synthetic_records(50);
        let split = split_dataset(&records, 3, (1.0, 0.0, 0.0)).unwrap();
        assert_eq!(split.train.len(), 50);
        assert!(split.val.is_empty() && split.test.is_empty());
    }

    #[test]
    fn split_deterministic_and_order_independent() {
        let records = synthetic_records(200);
        let a = split_dataset(&records, 11, (0.8, 0.1, 0.1)).unwrap();
        let b = split_dataset(&records, 11, (0.8, 0.1, 0.1)).unwrap();
        assert_eq!(a.train.len(), b.train.len());
        let mut reversed = records.clone();
        reversed.reverse();
        let c = split_dataset(&reversed, 11, (0.8, 0.1, 0.1)).unwrap();
        let names = |v: &[SampleRecord]| {
            let mut n: Vec<_> = v.iter().map(|r| r.path.clone()).collect();
            n.sort();
            n
        };
        assert_eq!(names(&a.train), names(&c.train));
        assert_eq!(names(&a.test), names(&c.test));
    }

    #[test]
    fn split_fractions_within_one_percent_on_10k_names() {
        let records = synthetic_records(10_000);
        let split = split_dataset(&records, 7, (0.8, 0.1, 0.1)).unwrap();
        let total = records.len() as f64;
        assert!((split.train.len() as f64 / total - 0.8).abs() < 0.01);
        assert!((split.val.len() as f64 / total - 0.1).abs() < 0.01);
        assert!((split.test.len() as f64 / total - 0.1).abs() < 0.01);
    }

    #[test]
    fn middle_gray_image_normalizes_to_zero() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("30_1_0_test.png");
        let img = image::RgbImage::from_pixel(8, 8, image::Rgb([128, 128, 128]));
        img.save(&path).unwrap();
        let rec = SampleRecord { path, age_years: 30, gender: Gender::Female, bucket: 3 };
        let batch: Batch<f64> = load_batch(&[rec], 8, false, 0).unwrap();
        // 128/255 is not exactly 0.5; allow the quantization gap
        for &v in batch.images.data().iter() {
            assert!(v.abs() < 0.01, "{}", v);
        }
        assert_eq!(batch.gender_labels, vec![1]);
        assert_eq!(batch.bucket_labels, vec![3]);
    }

    #[test]
    fn flip_is_involution_and_keyed_by_name() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("30_0_0_flip.png");
        let mut img = image::RgbImage::new(4, 4);
        for y in 0..4 {
            for x in 0..4 {
                img.put_pixel(x, y, image::Rgb([(x * 60) as u8, 0, (y * 60) as u8]));
            }
        }
        img.save(&path).unwrap();
        let rec = SampleRecord { path, age_years: 30, gender: Gender::Male, bucket: 3 };
        let plain: Batch<f64> = load_batch(&[rec.clone()], 4, false, 0).unwrap();
        // find an aug seed whose keyed coin flips this record
        let name = "30_0_0_flip.png";
        let flip_seed = (0..64u64).find(|&s| mix(fnv1a(name.as_bytes()), s) & 1 == 1).unwrap();
        let flipped: Batch<f64> = load_batch(&[rec], 4, true, flip_seed).unwrap();
        let p = plain.images.data();
        let q = flipped.images.data();
        for c in 0..3 {
            for y in 0..4 {
                for x in 0..4 {
                    assert_eq!(p[(c * 4 + y) * 4 + x], q[(c * 4 + y) * 4 + (3 - x)]);
                }
            }
        }
    }

    #[test]
    fn scan_reports_census_and_skips_malformed() {
        let dir = tempfile::tempdir().unwrap();
        let img = image::RgbImage::from_pixel(4, 4, image::Rgb([10, 20, 30]));
        for name in ["25_0_2_a.png", "8_1_0_b.png", "61_1_3_c.png", "badname.png"] {
            img.save(dir.path().join(name)).unwrap();
        }
        let scheme = BucketScheme::default();
        let (records, census) = scan_dataset(dir.path(), &scheme).unwrap();
        assert_eq!(records.len(), 3);
        assert_eq!(census.total, 3);
        assert_eq!(census.male, 1);
        assert_eq!(census.female, 2);
        assert_eq!(census.skipped, 1);
        assert_eq!(census.per_bucket[0], 1);
        assert_eq!(census.per_bucket[2], 1);
        assert_eq!(census.per_bucket[6], 1);
    }

    #[test]
    fn empty_dir_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        assert!(scan_dataset(dir.path(), &BucketScheme::default()).is_err());
    }
}
