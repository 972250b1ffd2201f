use std::f64::consts::PI;
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::integrate::{solve, OdeSystem, SolverConfig, StateLayout};
use crate::io::write_atomic;
use crate::objectives::RegressionLoss;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TimeSeriesConfig {
    pub a: [[f64; 2]; 2],
    pub u0: [f64; 2],
    pub horizon: f64,
    pub points: usize,
    pub rtol: f64,
    pub atol: f64,
}

impl Default for TimeSeriesConfig {
    fn default() -> Self {
        Self {
            a: [[-0.1, 2.0], [-2.0, -0.1]],
            u0: [2.0, 0.0],
            horizon: 1.5,
            points: 30,
            rtol: 1e-9,
            atol: 1e-11,
        }
    }
}

impl TimeSeriesConfig {
    pub fn times(&self) -> Vec<f64> {
        let last = (self.points - 1) as f64;
        (0..self.points)
            .map(|k| if k + 1 == self.points { self.horizon } else { self.horizon * k as f64 / last })
            .collect()
    }
}

/// `du/dt = A u∘3` with the cube taken element-wise.
pub struct CubicOde {
    pub a: [[f64; 2]; 2],
}

impl OdeSystem for CubicOde {
    fn len(&self) -> usize {
        2
    }

    fn rhs(&self, _t: f64, x: &[f64], dx: &mut [f64]) {
        let c = [x[0].powi(3), x[1].powi(3)];
        for (i, d) in dx.iter_mut().enumerate() {
            *d = self.a[i][0] * c[0] + self.a[i][1] * c[1];
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimeSeriesDataset {
    pub config: TimeSeriesConfig,
    pub times: Vec<f64>,
    pub targets: Vec<Vec<f64>>,
}

pub fn generate_timeseries(config: &TimeSeriesConfig) -> Result<TimeSeriesDataset> {
    if config.points < 2 || !(config.horizon > 0.0) {
        return Err(Error::Config("time series needs at least two points and a positive horizon".into()));
    }
    let times = config.times();
    let solver = SolverConfig::dopri5(config.rtol, config.atol);
    let rec = solve(
        &CubicOde { a: config.a },
        &config.u0,
        0.0,
        config.horizon,
        &solver,
        &times,
        StateLayout::plain(2),
    )?;
    let mut targets = rec.outputs;
    targets[0] = config.u0.to_vec();
    Ok(TimeSeriesDataset {
        config: config.clone(),
        times,
        targets,
    })
}

impl TimeSeriesDataset {
    pub fn loss(&self) -> Result<RegressionLoss> {
        RegressionLoss::equidistant(self.times.clone(), self.targets.clone())
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["t", "u0", "u1"])?;
        for (t, u) in self.times.iter().zip(&self.targets) {
            w.write_record([t.to_string(), u[0].to_string(), u[1].to_string()])?;
        }
        Ok(String::from_utf8(w.into_inner().map_err(|e| e.into_error())?).expect("utf8"))
    }

    pub fn metadata(&self) -> Result<DatasetMetadata> {
        let flat: Vec<f64> = self.targets.iter().flatten().copied().collect();
        DatasetMetadata::new("timeseries", &self.config, &flat)
    }
}

/// Eight isotropic Gaussians with equal weights, centred on a circle about the origin.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MixtureDensity {
    pub radius: f64,
    pub std: f64,
}

pub const MIXTURE_COMPONENTS: usize = 8;

impl Default for MixtureDensity {
    fn default() -> Self {
        Self {
            radius: 4.0 / 1.414,
            std: 0.5 / 1.414,
        }
    }
}

impl MixtureDensity {
    pub fn new(radius: f64, std: f64) -> Result<Self> {
        if !(radius >= 0.0 && std > 0.0 && radius.is_finite() && std.is_finite()) {
            return Err(Error::Config(format!("invalid mixture geometry: radius {radius}, std {std}")));
        }
        Ok(Self { radius, std })
    }

    pub fn means(&self) -> Vec<[f64; 2]> {
        (0..MIXTURE_COMPONENTS)
            .map(|k| {
                let a = 2.0 * PI * k as f64 / MIXTURE_COMPONENTS as f64;
                [self.radius * a.cos(), self.radius * a.sin()]
            })
            .collect()
    }

    pub fn log_density(&self, y: [f64; 2]) -> f64 {
        let var = self.std * self.std;
        let norm = -(2.0 * PI * var).ln() - (MIXTURE_COMPONENTS as f64).ln();
        let terms: Vec<f64> = self
            .means()
            .iter()
            .map(|m| norm - ((y[0] - m[0]).powi(2) + (y[1] - m[1]).powi(2)) / (2.0 * var))
            .collect();
        let top = terms.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        top + terms.iter().map(|v| (v - top).exp()).sum::<f64>().ln()
    }

    pub fn log_density_batch(&self, ys: ArrayView2<'_, f64>) -> Vec<f64> {
        ys.rows().into_iter().map(|r| self.log_density([r[0], r[1]])).collect()
    }

    /// Draws `n` samples and the component each came from.
    pub fn sample_labeled(&self, n: usize, seed: u64) -> (Array2<f64>, Vec<usize>) {
        self.sample_with(n, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    pub fn sample_with<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> (Array2<f64>, Vec<usize>) {
        let means = self.means();
        let mut out = Array2::zeros((n, 2));
        let mut labels = Vec::with_capacity(n);
        for mut row in out.rows_mut() {
            let k = rng.random_range(0..MIXTURE_COMPONENTS);
            for j in 0..2 {
                let z: f64 = rng.sample(StandardNormal);
                row[j] = means[k][j] + self.std * z;
            }
            labels.push(k);
        }
        (out, labels)
    }
}

pub fn sample_mixture(density: &MixtureDensity, n: usize, seed: u64) -> Array2<f64> {
    density.sample_labeled(n, seed).0
}

/// Per-column affine map to zero mean and unit variance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardizer {
    pub fn fit(raw: ArrayView2<'_, f64>) -> Result<Self> {
        if raw.nrows() == 0 {
            return Err(Error::Data("empty dataset".into()));
        }
        let mean: Array1<f64> = raw.mean_axis(Axis(0)).expect("non-empty");
        let std = raw.std_axis(Axis(0), 0.0);
        if let Some(c) = std.iter().position(|s| !(*s > 0.0)) {
            return Err(Error::Data(format!("column {c} has zero variance")));
        }
        Ok(Self {
            mean: mean.to_vec(),
            std: std.to_vec(),
        })
    }

    pub fn apply(&self, raw: ArrayView2<'_, f64>) -> Array2<f64> {
        let mut out = raw.to_owned();
        for mut row in out.rows_mut() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = (*v - self.mean[j]) / self.std[j];
            }
        }
        out
    }

    pub fn invert(&self, standardized: ArrayView2<'_, f64>) -> Array2<f64> {
        let mut out = standardized.to_owned();
        for mut row in out.rows_mut() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = *v * self.std[j] + self.mean[j];
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CsvSchema {
    pub has_header: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CsvDataset {
    pub samples: Array2<f64>,
    pub transform: Standardizer,
}

/// Reads one numeric sample per row and standardizes every column.
pub fn load_csv(path: &Path, schema: CsvSchema) -> Result<CsvDataset> {
    let text = std::fs::read_to_string(path)?;
    parse_csv(&text, schema)
}

pub fn parse_csv(text: &str, schema: CsvSchema) -> Result<CsvDataset> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(schema.has_header)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let mut values = Vec::new();
    let mut width = None;
    let mut rows = 0;
    for rec in reader.records() {
        let rec = rec?;
        let line = rec.position().map_or(rows + 1, |p| p.line() as usize);
        if rec.iter().all(str::is_empty) {
            continue;
        }
        let w = *width.get_or_insert(rec.len());
        if rec.len() != w {
            return Err(Error::Data(format!("line {line}: expected {w} fields, found {}", rec.len())));
        }
        for field in rec.iter() {
            let v: f64 = field
                .parse()
                .map_err(|_| Error::Data(format!("line {line}: cannot parse {field:?} as a number")))?;
            if !v.is_finite() {
                return Err(Error::Data(format!("line {line}: non-finite value {field:?}")));
            }
            values.push(v);
        }
        rows += 1;
    }
    let Some(width) = width else {
        return Err(Error::Data("empty dataset".into()));
    };
    let raw = Array2::from_shape_vec((rows, width), values).expect("rectangular");
    let transform = Standardizer::fit(raw.view())?;
    Ok(CsvDataset {
        samples: transform.apply(raw.view()),
        transform,
    })
}

/// Config echo plus a checksum of the generated values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetMetadata {
    pub kind: String,
    pub config: serde_json::Value,
    pub count: usize,
    pub sha256: String,
}

impl DatasetMetadata {
    pub fn new<C: Serialize>(kind: &str, config: &C, values: &[f64]) -> Result<Self> {
        Ok(Self {
            kind: kind.into(),
            config: serde_json::to_value(config)?,
            count: values.len(),
            sha256: checksum(values),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, serde_json::to_string_pretty(self)?.as_bytes())
    }
}

/// SHA-256 over the little-endian bytes of `values`.
pub fn checksum(values: &[f64]) -> String {
    let mut h = Sha256::new();
    for v in values {
        h.update(v.to_le_bytes());
    }
    format!("{:x}", h.finalize())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::array;

    #[test]
    fn timeseries_starts_at_initial_value() {
        let d = generate_timeseries(&TimeSeriesConfig::default()).unwrap();
        assert_eq!(d.targets[0], vec![2.0, 0.0]);
        assert_eq!(d.times.len(), 30);
        assert_eq!(*d.times.last().unwrap(), 1.5);
        let spacing = d.times[1] - d.times[0];
        assert!(d.times.windows(2).all(|w| (w[1] - w[0] - spacing).abs() < 1e-14));
    }

    #[test]
    fn cubic_field_at_the_initial_value() {
        let mut dx = [0.0; 2];
        CubicOde { a: TimeSeriesConfig::default().a }.rhs(0.0, &[2.0, 0.0], &mut dx);
        assert_eq!(dx, [-0.8, -16.0]);
    }

    #[test]
    fn timeseries_is_converged_in_tolerance() {
        let base = TimeSeriesConfig::default();
        let a = generate_timeseries(&base).unwrap();
        let b = generate_timeseries(&TimeSeriesConfig {
            rtol: base.rtol / 2.0,
            atol: base.atol / 2.0,
            ..base.clone()
        })
        .unwrap();
        for (u, v) in a.targets.iter().zip(&b.targets) {
            for (x, y) in u.iter().zip(v) {
                assert!((x - y).abs() < 1e-7);
            }
        }
        assert_eq!(a, generate_timeseries(&base).unwrap());
    }

    #[test]
    fn timeseries_csv_and_metadata() {
        let d = generate_timeseries(&TimeSeriesConfig::default()).unwrap();
        let csv = d.to_csv().unwrap();
        assert!(csv.starts_with("t,u0,u1\n0,2,0\n"));
        let meta = d.metadata().unwrap();
        assert_eq!(meta.count, 60);
        assert_eq!(meta.sha256.len(), 64);
        assert_eq!(meta.config["points"], 30);
    }

    #[test]
    fn mixture_log_density_at_origin() {
        // all components are equidistant from the origin
        let m = MixtureDensity::new(4.0, 0.4).unwrap();
        let expected = -(2.0 * PI * 0.16f64).ln() - 16.0 / 0.32;
        assert_abs_diff_eq!(m.log_density([0.0, 0.0]), expected, epsilon = 1e-12);
    }

    #[test]
    fn mixture_density_integrates_to_one() {
        let m = MixtureDensity::default();
        let (lim, n) = (m.radius + 8.0 * m.std, 600);
        let h = 2.0 * lim / n as f64;
        let mut total = 0.0;
        for i in 0..n {
            for j in 0..n {
                let y = [-lim + (i as f64 + 0.5) * h, -lim + (j as f64 + 0.5) * h];
                total += m.log_density(y).exp() * h * h;
            }
        }
        assert_abs_diff_eq!(total, 1.0, epsilon = 1e-6);
    }

    #[test]
    fn mixture_samples_are_centred() {
        let m = MixtureDensity::default();
        let (s, labels) = m.sample_labeled(100_000, 3);
        let mean = s.mean_axis(Axis(0)).unwrap();
        let stderr = (m.radius * m.radius / 2.0 + m.std * m.std).sqrt() / (1e5f64).sqrt();
        assert!(mean.iter().all(|v| v.abs() < 3.0 * stderr), "{mean}");
        let means = m.means();
        for k in 0..MIXTURE_COMPONENTS {
            let rows: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == k).collect();
            let sel = s.select(Axis(0), &rows);
            let c = sel.mean_axis(Axis(0)).unwrap();
            let err = m.std / (rows.len() as f64).sqrt();
            assert!((c[0] - means[k][0]).abs() < 4.0 * err && (c[1] - means[k][1]).abs() < 4.0 * err);
        }
        assert_eq!(sample_mixture(&m, 10, 9), sample_mixture(&m, 10, 9));
        assert_ne!(sample_mixture(&m, 10, 9), sample_mixture(&m, 10, 10));
    }

    #[test]
    fn two_point_standardization() {
        let d = parse_csv("1,2\n3,4\n", CsvSchema::default()).unwrap();
        assert_eq!(d.samples, array![[-1.0, -1.0], [1.0, 1.0]]);
        let back = d.transform.invert(d.samples.view());
        assert_eq!(back, array![[1.0, 2.0], [3.0, 4.0]]);
    }

    #[test]
    fn csv_round_trip_recovers_raw_values() {
        let text = "a,b,c\n0.1,5,-3\n2.5,7.25,1e-3\n-1,0,8\n4,1,2\n";
        let d = parse_csv(text, CsvSchema { has_header: true }).unwrap();
        let back = d.transform.invert(d.samples.view());
        let raw = array![[0.1, 5.0, -3.0], [2.5, 7.25, 1e-3], [-1.0, 0.0, 8.0], [4.0, 1.0, 2.0]];
        assert!(back.iter().zip(raw.iter()).all(|(a, b)| (a - b).abs() < 1e-12));
        let col_means = d.samples.mean_axis(Axis(0)).unwrap();
        assert!(col_means.iter().all(|m| m.abs() < 1e-12));
    }

    #[test]
    fn csv_errors() {
        assert!(matches!(parse_csv("", CsvSchema::default()), Err(Error::Data(m)) if m.contains("empty")));
        match parse_csv("1,2\n3,x\n", CsvSchema::default()) {
            Err(Error::Data(m)) => assert!(m.contains("line 2"), "{m}"),
            other => panic!("{other:?}"),
        }
        match parse_csv("1,2\n3\n", CsvSchema::default()) {
            Err(Error::Data(m)) => assert!(m.contains("line 2"), "{m}"),
            other => panic!("{other:?}"),
        }
        match parse_csv("1,2\n1,4\n", CsvSchema::default()) {
            Err(Error::Data(m)) => assert!(m.contains("column 0"), "{m}"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn load_csv_reads_files() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.csv");
        std::fs::write(&p, "1,2\n3,4\n").unwrap();
        assert_eq!(load_csv(&p, CsvSchema::default()).unwrap().samples.nrows(), 2);
        assert!(matches!(load_csv(&dir.path().join("missing.csv"), CsvSchema::default()), Err(Error::Io(_))));
    }
}
