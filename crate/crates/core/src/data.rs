//! Datasets, non-IID client partitioning and heterogeneity statistics.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::ndcore::{sample_dirichlet, DenseTensor, RngStream};
use crate::{Error, Result};

/// Maximum number of full partition redraws before giving up on empty clients.
pub const MAX_PARTITION_ATTEMPTS: usize = 100;

/// Stream used to draw class directions when `features < classes`.
const DIRECTION_STREAM: u64 = 0xD1EC_7105;

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub x: DenseTensor,
    pub y: Vec<usize>,
    pub num_classes: usize,
}

impl Dataset {
    pub fn new(x: DenseTensor, y: Vec<usize>, num_classes: usize) -> Result<Self> {
        if x.shape().len() != 2 {
            return Err(Error::Dimension(format!("features must be 2-D, got {:?}", x.shape())));
        }
        if y.is_empty() {
            return Err(Error::Data("dataset has no samples".into()));
        }
        if y.len() != x.rows() {
            return Err(Error::Dimension(format!("{} labels for {} rows", y.len(), x.rows())));
        }
        if let Some(&bad) = y.iter().find(|&&c| c >= num_classes) {
            return Err(Error::Data(format!("label {bad} out of range for {num_classes} classes")));
        }
        Ok(Self { x, y, num_classes })
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn num_features(&self) -> usize {
        self.x.cols()
    }

    /// Rows at `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> Result<Dataset> {
        let (x, y) = self.gather(indices)?;
        Ok(Dataset { x, y, num_classes: self.num_classes })
    }

    /// Features and labels at `indices` without the non-empty check.
    pub fn gather(&self, indices: &[usize]) -> Result<(DenseTensor, Vec<usize>)> {
        let f = self.num_features();
        let mut data = Vec::with_capacity(indices.len() * f);
        let mut y = Vec::with_capacity(indices.len());
        for &i in indices {
            if i >= self.len() {
                return Err(Error::Dimension(format!("index {i} out of range for {} samples", self.len())));
            }
            data.extend_from_slice(self.x.row(i));
            y.push(self.y[i]);
        }
        Ok((DenseTensor::new(data, vec![indices.len(), f])?, y))
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for &c in &self.y {
            counts[c] += 1;
        }
        counts
    }
}

/// Gaussian blobs with unit covariance; class `c` is centered at `class_sep · u_c`.
///
/// Labels are balanced (`y[i] = i mod classes`). With `features ≥ classes`
/// the directions `u_c` are the standard basis vectors, otherwise they are
/// fixed random unit vectors independent of `rng`.
pub fn generate_synthetic(
    rng: &mut RngStream,
    n: usize,
    features: usize,
    classes: usize,
    class_sep: f32,
) -> Result<Dataset> {
    if classes < 2 {
        return Err(Error::Parameter(format!("need at least 2 classes, got {classes}")));
    }
    if features == 0 {
        return Err(Error::Parameter("need at least one feature".into()));
    }
    if n < classes {
        return Err(Error::Parameter(format!("{n} samples cannot cover {classes} classes")));
    }
    if !class_sep.is_finite() {
        return Err(Error::Parameter("class separation must be finite".into()));
    }
    let directions = class_directions(features, classes);
    let mut data = Vec::with_capacity(n * features);
    let mut y = Vec::with_capacity(n);
    for i in 0..n {
        let c = i % classes;
        let noise = rng.gaussian_vec(0.0, 1.0, features);
        data.extend(noise.iter().zip(&directions[c]).map(|(z, u)| z + class_sep * u));
        y.push(c);
    }
    Dataset::new(DenseTensor::new(data, vec![n, features])?, y, classes)
}

fn class_directions(features: usize, classes: usize) -> Vec<Vec<f32>> {
    if features >= classes {
        return (0..classes)
            .map(|c| (0..features).map(|j| if j == c { 1.0 } else { 0.0 }).collect())
            .collect();
    }
    let mut rng = RngStream::new(0, DIRECTION_STREAM);
    (0..classes)
        .map(|_| loop {
            let v = rng.gaussian_vec(0.0, 1.0, features);
            let norm = v.iter().map(|a| f64::from(*a).powi(2)).sum::<f64>().sqrt();
            if norm > 1e-6 {
                break v.iter().map(|a| (f64::from(*a) / norm) as f32).collect();
            }
        })
        .collect()
}

/// Degree of label skew across clients.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Concentration {
    /// Every class is dealt round-robin across clients.
    Iid,
    /// Per-class client proportions drawn from `Dir(α, …, α)`.
    Dirichlet(f64),
}

impl Concentration {
    pub fn validate(self) -> Result<()> {
        match self {
            Concentration::Dirichlet(a) if !(a > 0.0 && a.is_finite()) => {
                Err(Error::Parameter(format!("alpha must be positive and finite, got {a}")))
            }
            _ => Ok(()),
        }
    }
}

impl std::fmt::Display for Concentration {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Concentration::Iid => f.write_str("iid"),
            Concentration::Dirichlet(a) => write!(f, "{a}"),
        }
    }
}

impl FromStr for Concentration {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s.eq_ignore_ascii_case("iid") {
            return Ok(Concentration::Iid);
        }
        let a: f64 = s
            .parse()
            .map_err(|_| Error::Usage(format!("alpha must be a positive number or 'iid', got '{s}'")))?;
        let c = Concentration::Dirichlet(a);
        c.validate().map_err(|e| Error::Usage(e.to_string()))?;
        Ok(c)
    }
}

impl Serialize for Concentration {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            Concentration::Iid => s.serialize_str("iid"),
            Concentration::Dirichlet(a) => s.serialize_f64(*a),
        }
    }
}

impl<'de> Deserialize<'de> for Concentration {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(f64),
            Text(String),
        }
        match Raw::deserialize(d)? {
            Raw::Num(a) => {
                let c = Concentration::Dirichlet(a);
                c.validate().map_err(serde::de::Error::custom)?;
                Ok(c)
            }
            Raw::Text(s) => s.parse().map_err(serde::de::Error::custom),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ClientPartition {
    pub client_id: usize,
    pub sample_indices: Vec<usize>,
    pub class_histogram: Vec<usize>,
}

impl ClientPartition {
    pub fn len(&self) -> usize {
        self.sample_indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sample_indices.is_empty()
    }
}

/// Splits `dataset` over `num_clients` by label.
///
/// For each class the sample indices are shuffled and cut at the cumulative
/// Dirichlet proportions. If any client ends up empty the whole allocation is
/// redrawn, up to [`MAX_PARTITION_ATTEMPTS`] times. Only labels are read, so
/// feature values never influence the assignment.
pub fn partition_dirichlet(
    rng: &mut RngStream,
    dataset: &Dataset,
    num_clients: usize,
    concentration: Concentration,
) -> Result<Vec<ClientPartition>> {
    partition_labels(rng, &dataset.y, dataset.num_classes, num_clients, concentration)
}

pub fn partition_labels(
    rng: &mut RngStream,
    labels: &[usize],
    num_classes: usize,
    num_clients: usize,
    concentration: Concentration,
) -> Result<Vec<ClientPartition>> {
    concentration.validate()?;
    if num_clients == 0 {
        return Err(Error::Parameter("need at least one client".into()));
    }
    if num_clients > labels.len() {
        return Err(Error::Parameter(format!(
            "{num_clients} clients exceed {} samples",
            labels.len()
        )));
    }
    let mut by_class = vec![Vec::new(); num_classes];
    for (i, &c) in labels.iter().enumerate() {
        if c >= num_classes {
            return Err(Error::Data(format!("label {c} out of range for {num_classes} classes")));
        }
        by_class[c].push(i);
    }

    let assignment = match concentration {
        Concentration::Iid => deal_round_robin(&by_class, num_clients),
        Concentration::Dirichlet(alpha) => {
            let mut found = None;
            for _ in 0..MAX_PARTITION_ATTEMPTS {
                let split = dirichlet_split(rng, &by_class, num_clients, alpha)?;
                if split.iter().all(|c| !c.is_empty()) {
                    found = Some(split);
                    break;
                }
            }
            found.ok_or_else(|| {
                Error::Data(format!(
                    "no partition without empty clients after {MAX_PARTITION_ATTEMPTS} draws \
                     (alpha {alpha}, {num_clients} clients)"
                ))
            })?
        }
    };

    Ok(assignment
        .into_iter()
        .enumerate()
        .map(|(client_id, mut sample_indices)| {
            sample_indices.sort_unstable();
            let mut class_histogram = vec![0; num_classes];
            for &i in &sample_indices {
                class_histogram[labels[i]] += 1;
            }
            ClientPartition { client_id, sample_indices, class_histogram }
        })
        .collect())
}

/// IID sentinel: deals each class in turn, continuing the client cursor across
/// classes so totals differ by at most one.
fn deal_round_robin(by_class: &[Vec<usize>], k: usize) -> Vec<Vec<usize>> {
    let mut out = vec![Vec::new(); k];
    let mut cursor = 0;
    for members in by_class {
        for &i in members {
            out[cursor % k].push(i);
            cursor += 1;
        }
    }
    out
}

fn dirichlet_split(rng: &mut RngStream, by_class: &[Vec<usize>], k: usize, alpha: f64) -> Result<Vec<Vec<usize>>> {
    let mut out = vec![Vec::new(); k];
    for members in by_class {
        let mut members = members.clone();
        rng.shuffle(&mut members);
        let p = sample_dirichlet(rng, alpha, k)?;
        let n = members.len();
        let mut start = 0;
        let mut cum = 0.0;
        for (client, pk) in p.iter().enumerate() {
            cum += pk;
            let end = if client + 1 == k { n } else { ((cum * n as f64) as usize).min(n) };
            let end = end.max(start);
            out[client].extend_from_slice(&members[start..end]);
            start = end;
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HeterogeneityStats {
    /// Mean over clients of the dominant-class share, in `[1/C, 1]`.
    pub avg_dominant_pct: f64,
    pub per_client_dominant: Vec<(usize, f64)>,
    /// Population (divide by K) standard deviation of client sizes.
    pub sample_std: f64,
    pub sample_counts: Vec<usize>,
}

pub fn heterogeneity_stats(partitions: &[ClientPartition]) -> HeterogeneityStats {
    let per_client_dominant: Vec<(usize, f64)> = partitions
        .iter()
        .map(|p| {
            let total: usize = p.class_histogram.iter().sum();
            let mut best = 0;
            for (c, &n) in p.class_histogram.iter().enumerate() {
                if n > p.class_histogram[best] {
                    best = c;
                }
            }
            let pct = if total == 0 { 0.0 } else { p.class_histogram[best] as f64 / total as f64 };
            (best, pct)
        })
        .collect();
    let sample_counts: Vec<usize> = partitions.iter().map(ClientPartition::len).collect();
    let k = partitions.len().max(1) as f64;
    let avg_dominant_pct = compensated_sum(per_client_dominant.iter().map(|d| d.1)) / k;
    let mean = sample_counts.iter().sum::<usize>() as f64 / k;
    let var = sample_counts.iter().map(|&n| (n as f64 - mean).powi(2)).sum::<f64>() / k;
    HeterogeneityStats {
        avg_dominant_pct,
        per_client_dominant,
        sample_std: var.sqrt(),
        sample_counts,
    }
}

/// Neumaier summation, so that e.g. ten shares of 0.1 average to exactly 0.1.
fn compensated_sum(values: impl Iterator<Item = f64>) -> f64 {
    let (mut sum, mut comp) = (0.0f64, 0.0f64);
    for v in values {
        let t = sum + v;
        comp += if sum.abs() >= v.abs() { (sum - t) + v } else { (v - t) + sum };
        sum = t;
    }
    sum + comp
}

/// Writes the whitespace-delimited text format: a `n features classes` header,
/// then `label f₀ f₁ …` per line. Values use the shortest exact decimal form,
/// so a reload is bit-exact.
pub fn to_text(dataset: &Dataset) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "{} {} {}", dataset.len(), dataset.num_features(), dataset.num_classes);
    for (i, &label) in dataset.y.iter().enumerate() {
        let _ = write!(s, "{label}");
        for v in dataset.x.row(i) {
            let _ = write!(s, " {v:?}");
        }
        s.push('\n');
    }
    s
}

pub fn from_text(text: &str) -> Result<Dataset> {
    let mut lines = text
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty());
    let (hline, header) = lines.next().ok_or(Error::Parse { line: 1, reason: "empty file".into() })?;
    let fields: Vec<&str> = header.split_whitespace().collect();
    if fields.len() != 3 {
        return Err(Error::Parse {
            line: hline,
            reason: format!("header needs 'n features classes', got '{header}'"),
        });
    }
    let parse_count = |s: &str, what: &str| {
        s.parse::<usize>().map_err(|_| Error::Parse {
            line: hline,
            reason: format!("bad {what} '{s}'"),
        })
    };
    let n = parse_count(fields[0], "sample count")?;
    let features = parse_count(fields[1], "feature count")?;
    let classes = parse_count(fields[2], "class count")?;
    if n == 0 || features == 0 || classes == 0 {
        return Err(Error::Parse { line: hline, reason: "header counts must be positive".into() });
    }

    let mut data = Vec::with_capacity(n * features);
    let mut y = Vec::with_capacity(n);
    for (line, row) in lines {
        if y.len() == n {
            return Err(Error::Parse { line, reason: format!("more than the declared {n} samples") });
        }
        let mut tok = row.split_whitespace();
        let label_s = tok.next().unwrap_or_default();
        let label: usize = label_s
            .parse()
            .map_err(|_| Error::Parse { line, reason: format!("bad label '{label_s}'") })?;
        if label >= classes {
            return Err(Error::Data(format!("line {line}: label {label} out of range for {classes} classes")));
        }
        let before = data.len();
        for t in tok {
            let v: f32 = t.parse().map_err(|_| Error::Parse { line, reason: format!("bad value '{t}'") })?;
            if !v.is_finite() {
                return Err(Error::Parse { line, reason: format!("non-finite value '{t}'") });
            }
            data.push(v);
        }
        if data.len() - before != features {
            return Err(Error::Parse {
                line,
                reason: format!("expected {features} features, found {}", data.len() - before),
            });
        }
        y.push(label);
    }
    if y.len() != n {
        return Err(Error::Parse {
            line: text.lines().count().max(1),
            reason: format!("declared {n} samples, found {}", y.len()),
        });
    }
    Dataset::new(DenseTensor::new(data, vec![n, features])?, y, classes)
}

pub fn load_flat_file(path: impl AsRef<Path>) -> Result<Dataset> {
    from_text(&fs::read_to_string(path)?)
}

pub fn save_flat_file(dataset: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, to_text(dataset))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn balanced(n: usize, classes: usize) -> Dataset {
        let y: Vec<usize> = (0..n).map(|i| i % classes).collect();
        Dataset::new(DenseTensor::zeros(&[n, 1]), y, classes).unwrap()
    }

    fn check_cover(parts: &[ClientPartition], n: usize) {
        let mut seen = vec![false; n];
        for p in parts {
            assert!(!p.is_empty());
            assert_eq!(p.class_histogram.iter().sum::<usize>(), p.len());
            for &i in &p.sample_indices {
                assert!(!seen[i], "index {i} assigned twice");
                seen[i] = true;
            }
        }
        assert!(seen.iter().all(|&s| s));
    }

    #[test]
    fn synthetic_is_deterministic_and_balanced() {
        let a = generate_synthetic(&mut RngStream::new(4, 1), 100, 8, 10, 3.0).unwrap();
        let b = generate_synthetic(&mut RngStream::new(4, 1), 100, 8, 10, 3.0).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.class_counts(), vec![10; 10]);
        assert!(matches!(
            generate_synthetic(&mut RngStream::new(0, 0), 5, 8, 10, 1.0),
            Err(Error::Parameter(_))
        ));
        assert!(generate_synthetic(&mut RngStream::new(0, 0), 10, 2, 1, 1.0).is_err());
    }

    #[test]
    fn synthetic_centers_on_basis_directions() {
        let d = generate_synthetic(&mut RngStream::new(9, 0), 20_000, 12, 4, 5.0).unwrap();
        for c in 0..4 {
            let rows: Vec<&[f32]> = (0..d.len()).filter(|&i| d.y[i] == c).map(|i| d.x.row(i)).collect();
            for j in 0..12 {
                let mean = rows.iter().map(|r| f64::from(r[j])).sum::<f64>() / rows.len() as f64;
                let want = if j == c { 5.0 } else { 0.0 };
                assert!((mean - want).abs() < 0.1, "class {c} dim {j}: {mean}");
            }
        }
    }

    #[test]
    fn iid_split_is_exact_on_balanced_data() {
        let d = balanced(50_000, 10);
        let parts = partition_dirichlet(&mut RngStream::new(0, 0), &d, 10, Concentration::Iid).unwrap();
        check_cover(&parts, d.len());
        let stats = heterogeneity_stats(&parts);
        assert!(stats.sample_counts.iter().all(|&n| n == 5000));
        assert_eq!(stats.sample_std, 0.0);
        assert_eq!(stats.avg_dominant_pct, 0.1);
    }

    #[test]
    fn single_client_takes_everything() {
        let d = balanced(37, 3);
        for c in [Concentration::Iid, Concentration::Dirichlet(0.05), Concentration::Dirichlet(5.0)] {
            let parts = partition_dirichlet(&mut RngStream::new(1, 0), &d, 1, c).unwrap();
            assert_eq!(parts[0].sample_indices, (0..37).collect::<Vec<_>>());
        }
    }

    #[test]
    fn dirichlet_partitions_cover_and_are_nonempty() {
        let d = balanced(500, 10);
        for seed in 0..50 {
            let parts = partition_dirichlet(&mut RngStream::new(seed, 0), &d, 10, Concentration::Dirichlet(0.3)).unwrap();
            check_cover(&parts, d.len());
        }
    }

    #[test]
    fn too_many_clients_rejected() {
        let d = balanced(5, 2);
        assert!(matches!(
            partition_dirichlet(&mut RngStream::new(0, 0), &d, 6, Concentration::Iid),
            Err(Error::Parameter(_))
        ));
        assert!(partition_dirichlet(&mut RngStream::new(0, 0), &d, 2, Concentration::Dirichlet(0.0)).is_err());
    }

    #[test]
    fn stats_hand_cases() {
        let parts = vec![
            ClientPartition { client_id: 0, sample_indices: (0..10).collect(), class_histogram: vec![0, 0, 0, 10] },
            ClientPartition { client_id: 1, sample_indices: (10..40).collect(), class_histogram: vec![15, 15, 0, 0] },
        ];
        let s = heterogeneity_stats(&parts);
        assert_eq!(s.sample_std, 10.0);
        assert_eq!(s.per_client_dominant, vec![(3, 1.0), (0, 0.5)]);
        assert_eq!(s.avg_dominant_pct, 0.75);
    }

    #[test]
    fn concentration_parsing() {
        assert_eq!("iid".parse::<Concentration>().unwrap(), Concentration::Iid);
        assert_eq!("0.5".parse::<Concentration>().unwrap(), Concentration::Dirichlet(0.5));
        assert!(matches!("-1".parse::<Concentration>(), Err(Error::Usage(_))));
        assert!("dense".parse::<Concentration>().is_err());
        let json = serde_json::to_string(&[Concentration::Iid, Concentration::Dirichlet(0.1)]).unwrap();
        assert_eq!(json, r#"["iid",0.1]"#);
        let back: Vec<Concentration> = serde_json::from_str(&json).unwrap();
        assert_eq!(back, vec![Concentration::Iid, Concentration::Dirichlet(0.1)]);
    }

    #[test]
    fn text_round_trip_is_bit_exact() {
        let x = DenseTensor::from_rows(&[vec![0.1, -2.5e-7], vec![3.0, 1.0 / 3.0], vec![-0.0, 1e30]]).unwrap();
        let d = Dataset::new(x, vec![1, 0, 1], 2).unwrap();
        let back = from_text(&to_text(&d)).unwrap();
        assert_eq!(back.y, d.y);
        let bits = |t: &Dataset| t.x.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&back), bits(&d));

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("fixture.txt");
        save_flat_file(&d, &path).unwrap();
        assert_eq!(load_flat_file(&path).unwrap(), d);
    }

    #[test]
    fn text_errors() {
        assert!(matches!(from_text(""), Err(Error::Parse { line: 1, .. })));
        assert!(matches!(from_text("1 2 2\n5 0.0 1.0\n"), Err(Error::Data(_))));
        assert!(matches!(from_text("2 2 2\n1 0.0 1.0\n"), Err(Error::Parse { .. })));
        assert!(matches!(from_text("1 2 2\n1 0.0\n"), Err(Error::Parse { line: 2, .. })));
        assert!(matches!(from_text("1 2\n"), Err(Error::Parse { line: 1, .. })));
        assert!(matches!(from_text("1 2 2\n1 0.0 x\n"), Err(Error::Parse { line: 2, .. })));
    }
}
