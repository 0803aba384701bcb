//! Dataset loading, synthesis, standardization and splitting.

use std::fs::File;
use std::io::{BufReader, Read};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::likelihood::Targets;
use crate::linalg::Matrix;
use crate::rng::{self, Purpose};
use crate::scalar::Scalar;

/// Fraction of rows held out for testing.
pub const TEST_FRACTION: f64 = 0.2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Regression,
    Classification,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset<T> {
    pub x: Matrix<T>,
    pub y: Targets<T>,
    pub task: Task,
    pub provenance: String,
}

impl<T: Scalar> Dataset<T> {
    pub fn new(x: Matrix<T>, y: Targets<T>, provenance: impl Into<String>) -> Result<Self> {
        if x.rows() != y.len() {
            return Err(Error::Shape(format!("{} rows but {} targets", x.rows(), y.len())));
        }
        let task = match y {
            Targets::Real(ref m) if m.cols() >= 1 => Task::Regression,
            Targets::Real(_) => return Err(Error::Shape("regression targets need a column".into())),
            Targets::Classes(_) => Task::Classification,
        };
        Ok(Dataset {
            x,
            y,
            task,
            provenance: provenance.into(),
        })
    }

    pub fn len(&self) -> usize {
        self.x.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.x.rows() == 0
    }

    pub fn dims(&self) -> usize {
        self.x.cols()
    }

    pub fn n_classes(&self) -> Option<usize> {
        match &self.y {
            Targets::Classes(c) => Some(c.iter().max().map_or(0, |m| m + 1)),
            Targets::Real(_) => None,
        }
    }

    pub fn select(&self, idx: &[usize]) -> Self {
        Dataset {
            x: self.x.select_rows(idx),
            y: self.y.select(idx),
            task: self.task,
            provenance: self.provenance.clone(),
        }
    }

    /// Keeps the first `n` rows (all of them when `n` is larger).
    pub fn head(&self, n: usize) -> Self {
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        self.select(&idx)
    }

    /// Deterministic shuffled split; the test part holds `round(test_fraction·n)` rows.
    pub fn split(&self, test_fraction: f64, seed: u64) -> Result<(Self, Self)> {
        if !(0.0..1.0).contains(&test_fraction) {
            return Err(Error::Argument(format!("test fraction {test_fraction} outside [0, 1)")));
        }
        let n = self.len();
        let mut idx: Vec<usize> = (0..n).collect();
        idx.shuffle(&mut rng::stream(seed, 0, Purpose::Data));
        let n_test = (test_fraction * n as f64).round() as usize;
        if n_test == 0 || n_test == n {
            return Err(Error::Argument(format!("cannot split {n} rows with fraction {test_fraction}")));
        }
        let (test, train) = idx.split_at(n_test);
        Ok((self.select(train), self.select(test)))
    }
}

/// Per-column affine map to zero mean and unit standard deviation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardizer {
    /// Columns with zero spread keep unit scale so they map to zero.
    pub fn fit<T: Scalar>(m: &Matrix<T>) -> Result<Self> {
        if m.rows() == 0 {
            return Err(Error::Argument("cannot standardize zero rows".into()));
        }
        let n = m.rows() as f64;
        let mut mean = vec![0.0; m.cols()];
        for i in 0..m.rows() {
            for (a, v) in mean.iter_mut().zip(m.row(i)) {
                *a += v.as_f64();
            }
        }
        mean.iter_mut().for_each(|a| *a /= n);
        let mut var = vec![0.0; m.cols()];
        for i in 0..m.rows() {
            for ((a, v), mu) in var.iter_mut().zip(m.row(i)).zip(&mean) {
                *a += (v.as_f64() - mu).powi(2);
            }
        }
        let std = var
            .into_iter()
            .map(|v| {
                let s = (v / n).sqrt();
                if s > 0.0 {
                    s
                } else {
                    1.0
                }
            })
            .collect();
        Ok(Standardizer { mean, std })
    }

    pub fn apply<T: Scalar>(&self, m: &Matrix<T>) -> Result<Matrix<T>> {
        self.check(m)?;
        Ok(Matrix::from_fn(m.rows(), m.cols(), |i, j| {
            T::of((m[(i, j)].as_f64() - self.mean[j]) / self.std[j])
        }))
    }

    pub fn invert<T: Scalar>(&self, m: &Matrix<T>) -> Result<Matrix<T>> {
        self.check(m)?;
        Ok(Matrix::from_fn(m.rows(), m.cols(), |i, j| {
            T::of(m[(i, j)].as_f64() * self.std[j] + self.mean[j])
        }))
    }

    fn check<T: Scalar>(&self, m: &Matrix<T>) -> Result<()> {
        if m.cols() != self.mean.len() {
            return Err(Error::Shape(format!(
                "standardizer fitted on {} columns, got {}",
                self.mean.len(),
                m.cols()
            )));
        }
        Ok(())
    }
}

/// Train/test pair standardized with training statistics.
#[derive(Clone, Debug)]
pub struct Prepared<T> {
    pub train: Dataset<T>,
    pub test: Dataset<T>,
    pub x_scaler: Standardizer,
    /// Present for regression; targets are standardized too.
    pub y_scaler: Option<Standardizer>,
}

/// Splits, then standardizes inputs (and regression targets) on the training part.
pub fn prepare<T: Scalar>(ds: &Dataset<T>, test_fraction: f64, seed: u64) -> Result<Prepared<T>> {
    let (mut train, mut test) = ds.split(test_fraction, seed)?;
    let x_scaler = Standardizer::fit(&train.x)?;
    train.x = x_scaler.apply(&train.x)?;
    test.x = x_scaler.apply(&test.x)?;
    let y_scaler = match (&train.y, &test.y) {
        (Targets::Real(ytr), Targets::Real(yte)) => {
            let s = Standardizer::fit(ytr)?;
            let (a, b) = (s.apply(ytr)?, s.apply(yte)?);
            train.y = Targets::Real(a);
            test.y = Targets::Real(b);
            Some(s)
        }
        _ => None,
    };
    Ok(Prepared {
        train,
        test,
        x_scaler,
        y_scaler,
    })
}

/// Loads a headed numeric CSV. Returns the dataset and the number of dropped rows.
///
/// Rows whose target does not parse are dropped and counted; a non-numeric
/// feature in a row with a valid target is a format error.
pub fn load_csv<T: Scalar>(path: &Path, target_column: &str, task: Task) -> Result<(Dataset<T>, usize)> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(file);
    let headers = rdr.headers().map_err(|e| Error::Format(e.to_string()))?.clone();
    let t_idx = headers
        .iter()
        .position(|h| h.trim() == target_column)
        .ok_or_else(|| Error::Format(format!("no column named {target_column:?} in {}", path.display())))?;
    let mut rows: Vec<Vec<T>> = Vec::new();
    let mut targets: Vec<f64> = Vec::new();
    let mut dropped = 0;
    for (line, rec) in rdr.records().enumerate() {
        let rec = match rec {
            Ok(r) => r,
            Err(_) => {
                dropped += 1;
                continue;
            }
        };
        let target = match rec.get(t_idx).and_then(|s| s.trim().parse::<f64>().ok()) {
            Some(v) if v.is_finite() => v,
            _ => {
                dropped += 1;
                continue;
            }
        };
        let mut feats = Vec::with_capacity(rec.len().saturating_sub(1));
        for (j, field) in rec.iter().enumerate() {
            if j == t_idx {
                continue;
            }
            let v: f64 = field.trim().parse().map_err(|_| {
                Error::Format(format!("{}: row {} column {j} is not numeric", path.display(), line + 2))
            })?;
            feats.push(T::of(v));
        }
        rows.push(feats);
        targets.push(target);
    }
    if rows.is_empty() {
        return Err(Error::Format(format!("{} has no usable rows", path.display())));
    }
    let x = Matrix::from_rows(&rows)?;
    let y = match task {
        Task::Regression => Targets::Real(Matrix::from_fn(targets.len(), 1, |i, _| T::of(targets[i]))),
        Task::Classification => {
            let mut classes = Vec::with_capacity(targets.len());
            for t in targets {
                if t < 0.0 || t.fract() != 0.0 {
                    return Err(Error::Format(format!("class label {t} is not a non-negative integer")));
                }
                classes.push(t as usize);
            }
            Targets::Classes(classes)
        }
    };
    Ok((Dataset::new(x, y, format!("csv:{}", path.display()))?, dropped))
}

/// Writes features then a `target` column, with round-trip float formatting.
pub fn write_csv<T: Scalar>(path: &Path, ds: &Dataset<T>) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Format(e.to_string()))?;
    let mut header: Vec<String> = (0..ds.dims()).map(|j| format!("x{j}")).collect();
    header.push("target".into());
    w.write_record(&header).map_err(|e| Error::Format(e.to_string()))?;
    for i in 0..ds.len() {
        let mut rec: Vec<String> = ds.x.row(i).iter().map(|v| format!("{:?}", v.as_f64())).collect();
        rec.push(match &ds.y {
            Targets::Real(y) => format!("{:?}", y[(i, 0)].as_f64()),
            Targets::Classes(c) => c[i].to_string(),
        });
        w.write_record(&rec).map_err(|e| Error::Format(e.to_string()))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

const IDX_IMAGES: u32 = 0x0000_0803;
const IDX_LABELS: u32 = 0x0000_0801;

/// Reads a file, transparently un-gzipping it.
fn read_maybe_gz(path: &Path) -> Result<Vec<u8>> {
    let mut raw = Vec::new();
    BufReader::new(File::open(path).map_err(|e| Error::io(path, e))?)
        .read_to_end(&mut raw)
        .map_err(|e| Error::io(path, e))?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        flate2::read::GzDecoder::new(&raw[..])
            .read_to_end(&mut out)
            .map_err(|e| Error::io(path, e))?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

fn be_u32(b: &[u8], at: usize) -> Result<u32> {
    b.get(at..at + 4)
        .map(|s| u32::from_be_bytes([s[0], s[1], s[2], s[3]]))
        .ok_or_else(|| Error::Format("truncated IDX header".into()))
}

/// Parses IDX image bytes into `(count, rows, cols, pixels)`.
pub fn parse_idx_images(bytes: &[u8]) -> Result<(usize, usize, usize, &[u8])> {
    let magic = be_u32(bytes, 0)?;
    if magic != IDX_IMAGES {
        return Err(Error::Format(format!("image magic {magic:#010x}, expected {IDX_IMAGES:#010x}")));
    }
    let n = be_u32(bytes, 4)? as usize;
    let r = be_u32(bytes, 8)? as usize;
    let c = be_u32(bytes, 12)? as usize;
    let body = &bytes[16..];
    if body.len() != n * r * c {
        return Err(Error::Format(format!("{} pixel bytes for {n} images of {r}×{c}", body.len())));
    }
    Ok((n, r, c, body))
}

pub fn parse_idx_labels(bytes: &[u8]) -> Result<&[u8]> {
    let magic = be_u32(bytes, 0)?;
    if magic != IDX_LABELS {
        return Err(Error::Format(format!("label magic {magic:#010x}, expected {IDX_LABELS:#010x}")));
    }
    let n = be_u32(bytes, 4)? as usize;
    let body = &bytes[8..];
    if body.len() != n {
        return Err(Error::Format(format!("{} label bytes for {n} labels", body.len())));
    }
    Ok(body)
}

/// Average-pools one `rows × cols` image to `side × side`, scaled to `[0, 1]`.
pub fn pool_image<T: Scalar>(pixels: &[u8], rows: usize, cols: usize, side: usize) -> Result<Vec<T>> {
    if side == 0 || rows % side != 0 || cols % side != 0 {
        return Err(Error::Argument(format!("cannot pool {rows}×{cols} to {side}×{side}")));
    }
    let (bh, bw) = (rows / side, cols / side);
    let denom = (bh * bw) as f64 * 255.0;
    let mut out = Vec::with_capacity(side * side);
    for bi in 0..side {
        for bj in 0..side {
            let mut s = 0u32;
            for i in bi * bh..(bi + 1) * bh {
                for j in bj * bw..(bj + 1) * bw {
                    s += pixels[i * cols + j] as u32;
                }
            }
            out.push(T::of(s as f64 / denom));
        }
    }
    Ok(out)
}

/// Loads IDX images and labels (plain or gzipped), pooled to `side × side` and flattened.
pub fn load_idx<T: Scalar>(images: &Path, labels: &Path, side: usize) -> Result<Dataset<T>> {
    let img_bytes = read_maybe_gz(images)?;
    let lab_bytes = read_maybe_gz(labels)?;
    let (n, r, c, body) = parse_idx_images(&img_bytes)?;
    let labs = parse_idx_labels(&lab_bytes)?;
    if labs.len() != n {
        return Err(Error::Format(format!("{n} images but {} labels", labs.len())));
    }
    let mut data = Vec::with_capacity(n * side * side);
    for k in 0..n {
        data.extend(pool_image::<T>(&body[k * r * c..(k + 1) * r * c], r, c, side)?);
    }
    let x = Matrix::from_vec(n, side * side, data)?;
    let y = Targets::Classes(labs.iter().map(|&b| b as usize).collect());
    Dataset::new(x, y, format!("idx:{}", images.display()))
}

/// `x ~ U(−5, 5)`, `y = 1.5·sin(x) + N(0, 0.1²)`.
pub fn make_toy_1d<T: Scalar>(n: usize, seed: u64) -> Result<Dataset<T>> {
    if n < 10 {
        return Err(Error::Argument(format!("toy data needs at least 10 points, got {n}")));
    }
    let mut rng = rng::stream(seed, 0, Purpose::Data);
    let noise = Normal::new(0.0, 0.1).expect("valid");
    let xs: Vec<f64> = (0..n).map(|_| rng.random_range(-5.0..5.0)).collect();
    let ys: Vec<f64> = xs.iter().map(|&x| 1.5 * x.sin() + noise.sample(&mut rng)).collect();
    Dataset::new(
        Matrix::from_fn(n, 1, |i, _| T::of(xs[i])),
        Targets::Real(Matrix::from_fn(n, 1, |i, _| T::of(ys[i]))),
        format!("toy_1d(n={n}, seed={seed})"),
    )
}

/// Two interleaving crescents with radial noise 0.15; classes alternate so counts differ by at most one.
pub fn make_banana<T: Scalar>(n: usize, seed: u64) -> Result<Dataset<T>> {
    if n < 10 {
        return Err(Error::Argument(format!("banana data needs at least 10 points, got {n}")));
    }
    let mut rng = rng::stream(seed, 0, Purpose::Data);
    let noise = Normal::new(0.0, 0.15).expect("valid");
    let mut rows = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let class = i % 2;
        let theta = rng.random_range(0.0..std::f64::consts::PI);
        let r = 1.0 + noise.sample(&mut rng);
        let (a, b) = (r * theta.cos(), r * theta.sin());
        let p = if class == 0 { [a, b] } else { [1.0 - a, 0.5 - b] };
        rows.push([T::of(p[0]), T::of(p[1])]);
        labels.push(class);
    }
    Dataset::new(
        Matrix::from_rows(&rows)?,
        Targets::Classes(labels),
        format!("banana(n={n}, seed={seed})"),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    #[test]
    fn csv_reads_exact_values() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.csv");
        std::fs::write(&p, "a,b,y\n1,2.5,3\n-4,5e-1,6\n7,8,9.25\n").unwrap();
        let (ds, dropped) = load_csv::<f64>(&p, "y", Task::Regression).unwrap();
        assert_eq!(dropped, 0);
        assert_eq!(ds.x, Matrix::from_rows(&[[1.0, 2.5], [-4.0, 0.5], [7.0, 8.0]]).unwrap());
        assert_eq!(ds.y, Targets::Real(Matrix::column_vector(&[3.0, 6.0, 9.25])));
    }

    #[test]
    fn malformed_target_row_is_dropped_and_counted() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("b.csv");
        std::fs::write(&p, "a,y\n1,2\n3,oops\n5,6\n").unwrap();
        let (ds, dropped) = load_csv::<f64>(&p, "y", Task::Regression).unwrap();
        assert_eq!((ds.len(), dropped), (2, 1));
        assert!(matches!(
            load_csv::<f64>(&dir.path().join("missing.csv"), "y", Task::Regression),
            Err(Error::Io { .. })
        ));
        std::fs::write(&p, "a,y\n1,x\n").unwrap();
        assert!(matches!(load_csv::<f64>(&p, "y", Task::Regression), Err(Error::Format(_))));
    }

    #[test]
    fn csv_round_trip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.csv");
        let ds = make_toy_1d::<f64>(25, 3).unwrap();
        write_csv(&p, &ds).unwrap();
        let (back, _) = load_csv::<f64>(&p, "target", Task::Regression).unwrap();
        assert_eq!(back.x, ds.x);
        assert_eq!(back.y, ds.y);
    }

    fn idx_bytes(images: &[Vec<u8>], side: usize) -> (Vec<u8>, Vec<u8>) {
        let mut img = Vec::new();
        img.extend(IDX_IMAGES.to_be_bytes());
        img.extend((images.len() as u32).to_be_bytes());
        img.extend((side as u32).to_be_bytes());
        img.extend((side as u32).to_be_bytes());
        for im in images {
            img.extend(im);
        }
        let mut lab = Vec::new();
        lab.extend(IDX_LABELS.to_be_bytes());
        lab.extend((images.len() as u32).to_be_bytes());
        lab.extend((0..images.len()).map(|k| (k % 10) as u8));
        (img, lab)
    }

    #[test]
    fn idx_constant_images_pool_to_constants() {
        let dir = tempfile::tempdir().unwrap();
        let (img, lab) = idx_bytes(&[vec![0u8; 784], vec![255u8; 784]], 28);
        let (pi, pl) = (dir.path().join("i"), dir.path().join("l"));
        // Gzip one of them to exercise both paths.
        let mut gz = flate2::write::GzEncoder::new(Vec::new(), flate2::Compression::default());
        gz.write_all(&img).unwrap();
        std::fs::write(&pi, gz.finish().unwrap()).unwrap();
        std::fs::write(&pl, &lab).unwrap();
        let ds = load_idx::<f64>(&pi, &pl, 7).unwrap();
        assert_eq!(ds.x.shape(), (2, 49));
        assert!(ds.x.row(0).iter().all(|&v| v == 0.0));
        assert!(ds.x.row(1).iter().all(|&v| v == 1.0));
        assert_eq!(ds.y, Targets::Classes(vec![0, 1]));
    }

    #[test]
    fn idx_rejects_bad_magic_and_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let (mut img, lab) = idx_bytes(&[vec![0u8; 16]], 4);
        let (pi, pl) = (dir.path().join("i"), dir.path().join("l"));
        std::fs::write(&pl, &lab).unwrap();
        img[3] = 0x01;
        std::fs::write(&pi, &img).unwrap();
        assert!(matches!(load_idx::<f64>(&pi, &pl, 2), Err(Error::Format(_))));
        let (img2, _) = idx_bytes(&[vec![0u8; 16], vec![0u8; 16]], 4);
        std::fs::write(&pi, &img2).unwrap();
        assert!(matches!(load_idx::<f64>(&pi, &pl, 2), Err(Error::Format(_))));
    }

    #[test]
    fn pooling_matches_hand_computed_block_means() {
        #[rustfmt::skip]
        let px: Vec<u8> = vec![
            0, 255, 10, 20,
            255, 0, 30, 40,
            100, 100, 255, 255,
            100, 100, 255, 0,
        ];
        let out = pool_image::<f64>(&px, 4, 4, 2).unwrap();
        let want = [510.0 / 4.0 / 255.0, 100.0 / 4.0 / 255.0, 100.0 / 255.0, 765.0 / 4.0 / 255.0];
        for (a, b) in out.iter().zip(want) {
            assert!((a - b).abs() < 1e-15);
        }
        assert!(pool_image::<f64>(&px, 4, 4, 3).is_err());
    }

    #[test]
    fn real_image_subsets_load_in_unit_range() {
        let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/images");
        let ds = load_idx::<f64>(
            &root.join("mnist-test-images-idx3-ubyte.gz"),
            &root.join("mnist-test-labels-idx1-ubyte.gz"),
            7,
        )
        .unwrap();
        assert_eq!(ds.dims(), 49);
        assert!(ds.x.as_slice().iter().all(|&v| (0.0..=1.0).contains(&v)));
        assert_eq!(ds.n_classes(), Some(10));
    }

    #[test]
    fn synthetic_generators() {
        let t = make_toy_1d::<f64>(500, 1).unwrap();
        assert!(t.x.as_slice().iter().all(|&v| (-5.0..=5.0).contains(&v)));
        assert_eq!(t, make_toy_1d::<f64>(500, 1).unwrap());
        assert_ne!(t, make_toy_1d::<f64>(500, 2).unwrap());
        let b = make_banana::<f64>(1000, 4).unwrap();
        let Targets::Classes(c) = &b.y else { panic!() };
        let frac = c.iter().filter(|&&k| k == 1).count() as f64 / 1000.0;
        assert!((frac - 0.5).abs() <= 0.02);
        assert!(make_toy_1d::<f64>(5, 0).is_err());
    }

    #[test]
    fn split_is_disjoint_exhaustive_and_seeded() {
        let ds = make_toy_1d::<f64>(101, 0).unwrap();
        let (tr, te) = ds.split(TEST_FRACTION, 7).unwrap();
        assert_eq!((tr.len(), te.len()), (81, 20));
        let mut all: Vec<u64> = tr.x.as_slice().iter().chain(te.x.as_slice()).map(|v| v.to_bits()).collect();
        all.sort();
        let mut orig: Vec<u64> = ds.x.as_slice().iter().map(|v| v.to_bits()).collect();
        orig.sort();
        assert_eq!(all, orig);
        assert_eq!(ds.split(TEST_FRACTION, 7).unwrap().1, te);
    }

    #[test]
    fn standardizer_uses_training_statistics() {
        let ds = make_banana::<f64>(200, 2).unwrap();
        let p = prepare(&ds, TEST_FRACTION, 1).unwrap();
        for j in 0..2 {
            let col = p.train.x.col(j);
            let m = col.iter().sum::<f64>() / col.len() as f64;
            let s = (col.iter().map(|v| (v - m).powi(2)).sum::<f64>() / col.len() as f64).sqrt();
            assert!(m.abs() < 1e-6 && (s - 1.0).abs() < 1e-6);
        }
        let (_, raw_test) = ds.split(TEST_FRACTION, 1).unwrap();
        assert_eq!(p.x_scaler.apply(&raw_test.x).unwrap(), p.test.x);
        let back = p.x_scaler.invert(&p.test.x).unwrap();
        assert!(back.max_abs_diff(&raw_test.x) < 1e-12);
    }
}
