//! Point cloud ingestion, synthetic scene generation and BEV pillarization.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{FwaError, Result};
use crate::kernels::gelu;
use crate::tensor::Mat;

pub const BINARY_MAGIC: &[u8; 4] = b"FWPC";

#[derive(Clone, Debug, PartialEq)]
pub struct Point {
    pub x: f64,
    pub y: f64,
    pub feature: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct PointCloud {
    points: Vec<Point>,
    f_in: usize,
}

impl PointCloud {
    pub fn new(f_in: usize) -> Self {
        Self {
            points: Vec::new(),
            f_in,
        }
    }

    pub fn push(&mut self, point: Point) -> Result<()> {
        if !point.x.is_finite() || !point.y.is_finite() {
            return Err(FwaError::Schema(format!(
                "non-finite coordinate ({}, {})",
                point.x, point.y
            )));
        }
        if point.feature.len() != self.f_in {
            return Err(FwaError::Schema(format!(
                "point has {} features, cloud declares {}",
                point.feature.len(),
                self.f_in
            )));
        }
        self.points.push(point);
        Ok(())
    }

    pub fn points(&self) -> &[Point] {
        &self.points
    }

    pub fn f_in(&self) -> usize {
        self.f_in
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn coords(&self) -> Vec<[f64; 2]> {
        self.points.iter().map(|p| [p.x, p.y]).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PointFormat {
    Csv,
    Binary,
}

impl PointFormat {
    /// `.bin` / `.fwpc` map to binary, everything else to CSV.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some("bin") | Some("fwpc") => PointFormat::Binary,
            _ => PointFormat::Csv,
        }
    }
}

pub fn ingest(path: impl AsRef<Path>, format: PointFormat) -> Result<PointCloud> {
    let file = File::open(path.as_ref())?;
    match format {
        PointFormat::Csv => read_csv(BufReader::new(file)),
        PointFormat::Binary => read_binary(BufReader::new(file)),
    }
}

pub fn read_csv<R: Read>(reader: R) -> Result<PointCloud> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(reader);

    let header = rdr.headers().map_err(|e| FwaError::Parse {
        line: 1,
        msg: e.to_string(),
    })?;
    let names: Vec<&str> = header.iter().collect();
    if names.len() < 2 || names[0] != "x" || names[1] != "y" {
        return Err(FwaError::Schema(format!(
            "expected header `x,y,f0,...`, found `{}`",
            names.join(",")
        )));
    }
    for (k, name) in names[2..].iter().enumerate() {
        if *name != format!("f{k}") {
            return Err(FwaError::Schema(format!(
                "feature column {k} must be named f{k}, found `{name}`"
            )));
        }
    }
    let f_in = names.len() - 2;

    let mut cloud = PointCloud::new(f_in);
    for record in rdr.records() {
        let record = record.map_err(|e| FwaError::Parse {
            line: e.position().map(|p| p.line()).unwrap_or(0),
            msg: e.to_string(),
        })?;
        let line = record.position().map(|p| p.line()).unwrap_or(0);
        if record.len() != f_in + 2 {
            return Err(FwaError::Schema(format!(
                "line {line}: expected {} feature(s), found {}",
                f_in,
                record.len().saturating_sub(2)
            )));
        }
        let mut values = Vec::with_capacity(record.len());
        for field in record.iter() {
            let v: f64 = field.parse().map_err(|_| FwaError::Parse {
                line,
                msg: format!("invalid number `{field}`"),
            })?;
            values.push(v);
        }
        if !values[0].is_finite() || !values[1].is_finite() {
            return Err(FwaError::Parse {
                line,
                msg: "coordinates must be finite".into(),
            });
        }
        cloud.points.push(Point {
            x: values[0],
            y: values[1],
            feature: values[2..].to_vec(),
        });
    }
    Ok(cloud)
}

pub fn read_binary<R: Read>(mut reader: R) -> Result<PointCloud> {
    let mut buf = Vec::new();
    reader.read_to_end(&mut buf)?;
    if buf.len() < 12 || &buf[..4] != BINARY_MAGIC {
        return Err(FwaError::Schema("missing FWPC header".into()));
    }
    let count = u32::from_le_bytes(buf[4..8].try_into().unwrap()) as usize;
    let f_in = u32::from_le_bytes(buf[8..12].try_into().unwrap()) as usize;
    let stride = 2 + f_in;
    let expected = 12 + count * stride * 8;
    if buf.len() != expected {
        return Err(FwaError::Schema(format!(
            "binary payload is {} bytes, header implies {expected}",
            buf.len()
        )));
    }
    let mut values = buf[12..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()));
    let mut cloud = PointCloud::new(f_in);
    for _ in 0..count {
        let x = values.next().unwrap();
        let y = values.next().unwrap();
        let feature = values.by_ref().take(f_in).collect();
        cloud.push(Point { x, y, feature })?;
    }
    Ok(cloud)
}

pub fn write(cloud: &PointCloud, path: impl AsRef<Path>, format: PointFormat) -> Result<()> {
    let mut out = BufWriter::new(File::create(path.as_ref())?);
    match format {
        PointFormat::Csv => write_csv(cloud, &mut out)?,
        PointFormat::Binary => write_binary(cloud, &mut out)?,
    }
    out.flush()?;
    Ok(())
}

/// Values are printed with Rust's shortest round-trip formatting, so
/// re-ingestion reproduces every `f64` exactly.
pub fn write_csv<W: Write>(cloud: &PointCloud, out: &mut W) -> Result<()> {
    let mut header = String::from("x,y");
    for k in 0..cloud.f_in {
        header.push_str(&format!(",f{k}"));
    }
    writeln!(out, "{header}")?;
    for p in &cloud.points {
        let mut line = format!("{:?},{:?}", p.x, p.y);
        for v in &p.feature {
            line.push_str(&format!(",{v:?}"));
        }
        writeln!(out, "{line}")?;
    }
    Ok(())
}

pub fn write_binary<W: Write>(cloud: &PointCloud, out: &mut W) -> Result<()> {
    let count = u32::try_from(cloud.len())
        .map_err(|_| FwaError::Config("too many points for binary format".into()))?;
    out.write_all(BINARY_MAGIC)?;
    out.write_all(&count.to_le_bytes())?;
    out.write_all(&(cloud.f_in as u32).to_le_bytes())?;
    for p in &cloud.points {
        out.write_all(&p.x.to_le_bytes())?;
        out.write_all(&p.y.to_le_bytes())?;
        for v in &p.feature {
            out.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Pillarization

/// Sparse BEV pillars. Rows of `features` line up with `coords` and `cells`.
#[derive(Clone, Debug, PartialEq)]
pub struct PillarSet {
    pub coords: Vec<[f64; 2]>,
    pub cells: Vec<[i64; 2]>,
    /// Number of input points pooled into each pillar.
    pub point_counts: Vec<usize>,
    pub features: Mat<f64>,
    pub resolution: f64,
}

impl PillarSet {
    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }
}

/// Single linear layer (`f_in -> d_out`) followed by GELU.
#[derive(Clone, Debug, PartialEq)]
pub struct PillarEncoder {
    /// `d_out × f_in`, row-major.
    pub weight: Mat<f64>,
    pub bias: Vec<f64>,
}

impl PillarEncoder {
    pub fn new(weight: Mat<f64>, bias: Vec<f64>) -> Result<Self> {
        if weight.rows == 0 {
            return Err(FwaError::Config("pillar encoder needs d_out >= 1".into()));
        }
        if bias.len() != weight.rows {
            return Err(FwaError::Shape(format!(
                "encoder bias has length {}, expected {}",
                bias.len(),
                weight.rows
            )));
        }
        Ok(Self { weight, bias })
    }

    pub fn identity(dim: usize) -> Result<Self> {
        Self::new(Mat::identity(dim), vec![0.0; dim])
    }

    /// Uniform init in `±1/sqrt(f_in)`, zero bias.
    pub fn seeded(f_in: usize, d_out: usize, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bound = 1.0 / (f_in.max(1) as f64).sqrt();
        let weight = Mat::from_fn(d_out, f_in, |_, _| rng.gen_range(-bound..bound));
        Self::new(weight, vec![0.0; d_out])
    }

    pub fn f_in(&self) -> usize {
        self.weight.cols
    }

    /// `GELU(W·v + b)` into `out`.
    pub fn encode_into(&self, v: &[f64], out: &mut [f64]) {
        for (j, o) in out.iter_mut().enumerate() {
            let pre = self
                .weight
                .row(j)
                .iter()
                .zip(v)
                .map(|(w, x)| w * x)
                .sum::<f64>()
                + self.bias[j];
            *o = gelu(pre);
        }
    }

    pub fn d_out(&self) -> usize {
        self.weight.rows
    }
}

#[inline]
pub fn cell_of(x: f64, resolution: f64) -> i64 {
    (x / resolution).floor() as i64
}

/// Pairwise (cascade) summation of equal-length vectors, in the given order.
fn pairwise_sum(rows: &[&[f64]], width: usize) -> Vec<f64> {
    const LEAF: usize = 8;
    if rows.len() <= LEAF {
        let mut acc = vec![0.0; width];
        for r in rows {
            for (a, v) in acc.iter_mut().zip(r.iter()) {
                *a += v;
            }
        }
        return acc;
    }
    let mid = rows.len() / 2;
    let mut left = pairwise_sum(&rows[..mid], width);
    let right = pairwise_sum(&rows[mid..], width);
    for (a, b) in left.iter_mut().zip(right) {
        *a += b;
    }
    left
}

/// Mean-pools points per `resolution × resolution` cell, then applies the
/// encoder. Pillars come out in ascending `(x_cell, y_cell)` order.
pub fn pillarize(
    cloud: &PointCloud,
    resolution: f64,
    encoder: &PillarEncoder,
) -> Result<PillarSet> {
    if !(resolution > 0.0 && resolution.is_finite()) {
        return Err(FwaError::Config(format!(
            "resolution must be positive, got {resolution}"
        )));
    }
    if encoder.f_in() != cloud.f_in() {
        return Err(FwaError::Shape(format!(
            "encoder expects {} input channels, cloud has {}",
            encoder.f_in(),
            cloud.f_in()
        )));
    }

    let mut cells: BTreeMap<(i64, i64), Vec<usize>> = BTreeMap::new();
    for (i, p) in cloud.points().iter().enumerate() {
        cells
            .entry((cell_of(p.x, resolution), cell_of(p.y, resolution)))
            .or_default()
            .push(i);
    }

    let d_out = encoder.d_out();
    let f_in = cloud.f_in();
    let mut set = PillarSet {
        coords: Vec::with_capacity(cells.len()),
        cells: Vec::with_capacity(cells.len()),
        point_counts: Vec::with_capacity(cells.len()),
        features: Mat::zeros(cells.len(), d_out),
        resolution,
    };
    for (row, ((cx, cy), members)) in cells.iter().enumerate() {
        let feats: Vec<&[f64]> = members
            .iter()
            .map(|&i| cloud.points()[i].feature.as_slice())
            .collect();
        let n = members.len() as f64;
        let pooled: Vec<f64> = pairwise_sum(&feats, f_in)
            .into_iter()
            .map(|s| s / n)
            .collect();

        encoder.encode_into(&pooled, set.features.row_mut(row));
        set.coords.push([
            (*cx as f64 + 0.5) * resolution,
            (*cy as f64 + 0.5) * resolution,
        ]);
        set.cells.push([*cx, *cy]);
        set.point_counts.push(members.len());
    }
    Ok(set)
}

// ---------------------------------------------------------------------------
// Synthetic scenes

/// Distribution of points per cluster.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CountDist {
    Fixed {
        n: usize,
    },
    Uniform {
        min: usize,
        max: usize,
    },
    /// Heavy-tailed: `exp(U(ln min, ln max))`, rounded down.
    LogUniform {
        min: usize,
        max: usize,
    },
}

impl CountDist {
    fn validate(&self) -> Result<()> {
        let ok = match *self {
            CountDist::Fixed { n } => n > 0,
            CountDist::Uniform { min, max } | CountDist::LogUniform { min, max } => {
                min > 0 && max >= min
            }
        };
        if ok {
            Ok(())
        } else {
            Err(FwaError::Config(format!(
                "invalid cluster point count {self:?}"
            )))
        }
    }

    fn sample(&self, rng: &mut ChaCha8Rng) -> usize {
        match *self {
            CountDist::Fixed { n } => n,
            CountDist::Uniform { min, max } => rng.gen_range(min..=max),
            CountDist::LogUniform { min, max } => {
                if min == max {
                    return min;
                }
                let u: f64 = rng.gen_range((min as f64).ln()..(max as f64).ln());
                (u.exp().floor() as usize).clamp(min, max)
            }
        }
    }
}

/// Declarative description of a clustered BEV scene.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    /// Scene spans `[0, extent[0]) × [0, extent[1])` meters.
    pub extent: [f64; 2],
    pub clusters: usize,
    pub cluster_points: CountDist,
    /// Per-axis standard deviation of cluster members, meters.
    pub cluster_spread: f64,
    #[serde(default)]
    pub background_points: usize,
    #[serde(default = "default_f_in")]
    pub f_in: usize,
}

fn default_f_in() -> usize {
    1
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.extent[0] > 0.0 && self.extent[1] > 0.0) {
            return Err(FwaError::Config(format!(
                "scene extent must be positive, got {:?}",
                self.extent
            )));
        }
        if !(self.cluster_spread > 0.0 && self.cluster_spread.is_finite()) {
            return Err(FwaError::Config(format!(
                "cluster spread must be positive, got {}",
                self.cluster_spread
            )));
        }
        self.cluster_points.validate()
    }
}

/// Gaussian blobs at uniformly placed centers plus uniform background
/// clutter. Deterministic for a fixed `(spec, seed)`.
pub fn generate_synthetic(spec: &SceneSpec, seed: u64) -> Result<PointCloud> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let spread =
        Normal::new(0.0, spec.cluster_spread).map_err(|e| FwaError::Config(e.to_string()))?;
    let mut cloud = PointCloud::new(spec.f_in);

    for _ in 0..spec.clusters {
        let cx = rng.gen_range(0.0..spec.extent[0]);
        let cy = rng.gen_range(0.0..spec.extent[1]);
        let n = spec.cluster_points.sample(&mut rng);
        for _ in 0..n {
            let x = cx + spread.sample(&mut rng);
            let y = cy + spread.sample(&mut rng);
            let feature = (0..spec.f_in).map(|_| rng.gen::<f64>()).collect();
            cloud.push(Point { x, y, feature })?;
        }
    }
    for _ in 0..spec.background_points {
        let x = rng.gen_range(0.0..spec.extent[0]);
        let y = rng.gen_range(0.0..spec.extent[1]);
        let feature = (0..spec.f_in).map(|_| rng.gen::<f64>()).collect();
        cloud.push(Point { x, y, feature })?;
    }
    Ok(cloud)
}
