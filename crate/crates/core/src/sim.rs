//! Disturbance sampling, closed-loop logs, region-of-attraction grids,
//! solve-time benchmarks and their CSV encodings.

use std::fmt;
use std::io::{self, Write};
use std::str::FromStr;
use std::time::Duration;

use nalgebra::DVector;
use rand::Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::model::{ProblemData, TerminalIngredients};
use crate::ocp::{self, CostMode, MemoryEntry, SolveStatus, SolverSettings, TerminalMode};
use crate::polytope::HPolytope;
use crate::runtime::MemoryEvent;

/// How disturbances are drawn from the box `W`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DisturbanceLaw {
    Uniform,
    /// Uniformly over the box corners.
    Vertex,
}

impl FromStr for DisturbanceLaw {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "uniform" => Ok(Self::Uniform),
            "vertex" => Ok(Self::Vertex),
            other => Err(Error::Config(format!("unknown disturbance law '{other}'"))),
        }
    }
}

pub fn sample_disturbance<R: Rng + ?Sized>(
    w_set: &HPolytope,
    rng: &mut R,
    law: DisturbanceLaw,
) -> Result<DVector<f64>> {
    let (lo, hi) = w_set
        .as_box()
        .ok_or_else(|| Error::invalid("disturbance sampling needs a box-shaped W"))?;
    Ok(DVector::from_iterator(
        lo.len(),
        lo.iter().zip(&hi).map(|(&l, &h)| match law {
            _ if h <= l => l,
            DisturbanceLaw::Uniform => rng.random_range(l..=h),
            DisturbanceLaw::Vertex => {
                if rng.random_bool(0.5) {
                    h
                } else {
                    l
                }
            }
        }),
    ))
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepRecord {
    pub k: usize,
    pub x: DVector<f64>,
    pub u: DVector<f64>,
    pub w: DVector<f64>,
    pub lambda: Vec<f64>,
    pub objective: f64,
    pub solve_time: Duration,
    /// Memory change applied right before this step's primary solve.
    pub event: MemoryEvent,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrajectoryLog {
    pub capacity: usize,
    pub seed: u64,
    pub config_hash: String,
    pub records: Vec<StepRecord>,
}

impl TrajectoryLog {
    pub fn new(capacity: usize) -> Self {
        Self {
            capacity,
            ..Self::default()
        }
    }
}

/// Full-precision float formatting shared by all CSV writers.
pub fn fmt_f64(v: f64) -> String {
    // adding +0.0 folds -0.0 into 0.0
    format!("{:.16e}", v + 0.0)
}

fn write_meta<W: Write>(out: &mut W, config_hash: &str, seed: Option<u64>) -> io::Result<()> {
    match seed {
        Some(s) => writeln!(out, "# config_hash: {config_hash} seed: {s}"),
        None => writeln!(out, "# config_hash: {config_hash}"),
    }
}

fn join(cells: impl IntoIterator<Item = String>) -> String {
    cells.into_iter().collect::<Vec<_>>().join(",")
}

/// `k, x1..xn, u1..um, w1..wn, lambda_0..lambda_{M-1}, objective,
/// solve_time_ms, mem_event`, preceded by a `#` metadata line. Weights of
/// empty slots are written as zero.
pub fn write_trajectory_csv<W: Write>(log: &TrajectoryLog, n: usize, m: usize, out: &mut W) -> io::Result<()> {
    write_meta(out, &log.config_hash, Some(log.seed))?;
    let mut header = vec!["k".to_string()];
    header.extend((1..=n).map(|i| format!("x{i}")));
    header.extend((1..=m).map(|i| format!("u{i}")));
    header.extend((1..=n).map(|i| format!("w{i}")));
    header.extend((0..log.capacity).map(|j| format!("lambda_{j}")));
    header.extend(["objective", "solve_time_ms", "mem_event"].map(String::from));
    writeln!(out, "{}", header.join(","))?;
    for r in &log.records {
        let mut row = vec![r.k.to_string()];
        row.extend(r.x.iter().chain(r.u.iter()).chain(r.w.iter()).map(|v| fmt_f64(*v)));
        row.extend((0..log.capacity).map(|j| fmt_f64(r.lambda.get(j).copied().unwrap_or(0.0))));
        row.push(fmt_f64(r.objective));
        row.push(fmt_f64(r.solve_time.as_secs_f64() * 1e3));
        row.push(r.event.to_string());
        writeln!(out, "{}", join(row))?;
    }
    Ok(())
}

/// Cell-centred grid over a box.
#[derive(Clone, Debug, PartialEq)]
pub struct GridSpec {
    pub spacing: f64,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl GridSpec {
    pub fn new(spacing: f64, lower: Vec<f64>, upper: Vec<f64>) -> Result<Self> {
        if !(spacing > 0.0) || lower.len() != upper.len() || lower.iter().zip(&upper).any(|(l, u)| !(l < u)) {
            return Err(Error::invalid("grid needs a positive spacing and lower < upper"));
        }
        Ok(Self { spacing, lower, upper })
    }

    /// Centres of all cells, first coordinate varying fastest.
    pub fn points(&self) -> Vec<DVector<f64>> {
        let counts: Vec<usize> = self
            .lower
            .iter()
            .zip(&self.upper)
            .map(|(l, u)| ((u - l) / self.spacing - 1e-9).ceil().max(1.0) as usize)
            .collect();
        let total: usize = counts.iter().product();
        (0..total)
            .map(|mut idx| {
                DVector::from_iterator(
                    counts.len(),
                    counts.iter().zip(&self.lower).map(|(&c, &l)| {
                        let i = idx % c;
                        idx /= c;
                        l + (i as f64 + 0.5) * self.spacing
                    }),
                )
            })
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum RoaVariant {
    FixedTube,
    PrimaryAsync,
    FullSltmpc,
}

impl RoaVariant {
    pub const ALL: [RoaVariant; 3] = [RoaVariant::FixedTube, RoaVariant::PrimaryAsync, RoaVariant::FullSltmpc];

    pub fn as_str(&self) -> &'static str {
        match self {
            RoaVariant::FixedTube => "fixed_tube",
            RoaVariant::PrimaryAsync => "primary_async",
            RoaVariant::FullSltmpc => "full_sltmpc",
        }
    }
}

impl FromStr for RoaVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown RoA variant '{s}'")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CellStatus {
    Feasible,
    Infeasible,
    SolverFailure,
}

impl fmt::Display for CellStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CellStatus::Feasible => "feasible",
            CellStatus::Infeasible => "infeasible",
            CellStatus::SolverFailure => "solver_failure",
        })
    }
}

#[derive(Clone, Debug)]
pub struct RoaGrid {
    pub variant: RoaVariant,
    pub grid: GridSpec,
    pub points: Vec<DVector<f64>>,
    pub status: Vec<CellStatus>,
}

impl RoaGrid {
    pub fn feasible_count(&self) -> usize {
        self.status.iter().filter(|s| **s == CellStatus::Feasible).count()
    }
}

/// Feasibility of one controller variant on every grid cell. The fixed-tube
/// variant uses the first memory entry; the primary uses all of them.
pub fn roa_grid(
    data: &ProblemData,
    terminal: &TerminalIngredients,
    memory: &[MemoryEntry],
    variant: RoaVariant,
    grid: &GridSpec,
    settings: &SolverSettings,
) -> Result<RoaGrid> {
    if memory.is_empty() && variant != RoaVariant::FullSltmpc {
        return Err(Error::invalid(
            "RoA of a memory-based controller needs at least one entry",
        ));
    }
    let points = grid.points();
    let status = points
        .par_iter()
        .map(|x0| {
            let spec = match variant {
                RoaVariant::FixedTube => ocp::build_fixed_tube(data, terminal, &memory[0], x0),
                RoaVariant::PrimaryAsync => ocp::build_primary(data, terminal, memory, x0, 0.0),
                RoaVariant::FullSltmpc => {
                    ocp::build_sltmpc(data, terminal, TerminalMode::Scaled, CostMode::Nominal, x0)
                }
            }?;
            Ok(match ocp::solve(&spec, settings)?.status {
                SolveStatus::Optimal => CellStatus::Feasible,
                SolveStatus::Infeasible => CellStatus::Infeasible,
                SolveStatus::NumericalFailure => CellStatus::SolverFailure,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(RoaGrid {
        variant,
        grid: grid.clone(),
        points,
        status,
    })
}

/// `x1..xn, variant, status`
pub fn write_roa_csv<W: Write>(grids: &[RoaGrid], config_hash: &str, out: &mut W) -> io::Result<()> {
    write_meta(out, config_hash, None)?;
    let n = grids.first().and_then(|g| g.points.first()).map_or(0, |p| p.len());
    let mut header: Vec<String> = (1..=n).map(|i| format!("x{i}")).collect();
    header.extend(["variant", "status"].map(String::from));
    writeln!(out, "{}", header.join(","))?;
    for g in grids {
        for (p, s) in g.points.iter().zip(&g.status) {
            let mut row: Vec<String> = p.iter().map(|v| fmt_f64(*v)).collect();
            row.push(g.variant.as_str().to_string());
            row.push(s.to_string());
            writeln!(out, "{}", join(row))?;
        }
    }
    Ok(())
}

/// `entry_id, step_i, vertex_index, vx1, vx2`: the state tube polygon
/// `{e | H_x e <= t_x[i]}` of every entry at every prediction step.
pub fn write_tubes_csv<W: Write>(
    data: &ProblemData,
    entries: &[MemoryEntry],
    config_hash: &str,
    out: &mut W,
) -> Result<()> {
    if data.n() != 2 {
        return Err(Error::invalid("tube polygons are only available in 2D"));
    }
    write_meta(out, config_hash, None)?;
    writeln!(out, "entry_id,step_i,vertex_index,vx1,vx2")?;
    for (id, entry) in entries.iter().enumerate() {
        for i in 0..=entry.tubes.horizon() {
            let poly = entry.tubes.state_polygon(data.x_set.normals(), i)?;
            for (vi, v) in poly.iter().enumerate() {
                writeln!(out, "{id},{i},{vi},{},{}", fmt_f64(v[0]), fmt_f64(v[1]))?;
            }
        }
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchRow {
    pub variant: String,
    pub samples: usize,
    pub mean_ms: f64,
    pub median_ms: f64,
    pub p95_ms: f64,
}

impl BenchRow {
    pub fn from_times(variant: impl Into<String>, times: &[Duration]) -> Self {
        let mut ms: Vec<f64> = times.iter().map(|t| t.as_secs_f64() * 1e3).collect();
        ms.sort_by(f64::total_cmp);
        let pick = |q: f64| {
            if ms.is_empty() {
                f64::NAN
            } else {
                ms[((ms.len() - 1) as f64 * q).round() as usize]
            }
        };
        let median = if ms.len().is_multiple_of(2) && !ms.is_empty() {
            0.5 * (ms[ms.len() / 2 - 1] + ms[ms.len() / 2])
        } else {
            pick(0.5)
        };
        Self {
            variant: variant.into(),
            samples: ms.len(),
            mean_ms: ms.iter().sum::<f64>() / ms.len() as f64,
            median_ms: median,
            p95_ms: pick(0.95),
        }
    }
}

/// Sequential solve-time statistics of the primary, fixed-tube and full
/// tube problems on the same states, each state repeated `repeats` times.
/// Only states where all three problems are feasible are timed.
pub fn bench_solve_times(
    data: &ProblemData,
    terminal: &TerminalIngredients,
    memory: &[MemoryEntry],
    states: &[DVector<f64>],
    repeats: usize,
    rho: f64,
    settings: &SolverSettings,
) -> Result<Vec<BenchRow>> {
    if memory.is_empty() {
        return Err(Error::invalid("benchmark needs at least one memory entry"));
    }
    let mut times = [Vec::new(), Vec::new(), Vec::new()];
    for x0 in states {
        let specs = [
            ocp::build_primary(data, terminal, memory, x0, rho)?,
            ocp::build_fixed_tube(data, terminal, &memory[0], x0)?,
            ocp::build_sltmpc(data, terminal, TerminalMode::Scaled, CostMode::Nominal, x0)?,
        ];
        let mut sample: [Vec<Duration>; 3] = Default::default();
        let mut all_feasible = true;
        for _ in 0..repeats {
            for (slot, spec) in specs.iter().enumerate() {
                let res = ocp::solve(spec, settings)?;
                all_feasible &= res.is_optimal();
                sample[slot].push(res.solve_time);
            }
        }
        if all_feasible {
            for (t, s) in times.iter_mut().zip(sample) {
                t.extend(s);
            }
        }
    }
    Ok(["primary", "fixed_tube", "full_sltmpc"]
        .into_iter()
        .zip(&times)
        .map(|(name, t)| BenchRow::from_times(name, t))
        .collect())
}

/// `variant, mean_ms, median_ms, p95_ms`
pub fn write_bench_csv<W: Write>(rows: &[BenchRow], config_hash: &str, out: &mut W) -> io::Result<()> {
    write_meta(out, config_hash, None)?;
    writeln!(out, "variant,mean_ms,median_ms,p95_ms")?;
    for r in rows {
        writeln!(
            out,
            "{},{},{},{}",
            r.variant,
            fmt_f64(r.mean_ms),
            fmt_f64(r.median_ms),
            fmt_f64(r.p95_ms)
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn w_box(r: f64) -> HPolytope {
        HPolytope::from_box(&[-r, -r], &[r, r]).unwrap()
    }

    #[test]
    fn degenerate_box_samples_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let w = sample_disturbance(&w_box(0.0), &mut rng, DisturbanceLaw::Uniform).unwrap();
        assert_eq!(w, DVector::zeros(2));
    }

    #[test]
    fn samples_stay_in_the_box_and_centre() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let w = w_box(0.1);
        let n = 1_000_000;
        let mut sum = DVector::zeros(2);
        for _ in 0..n {
            let s = sample_disturbance(&w, &mut rng, DisturbanceLaw::Uniform).unwrap();
            assert!(s.iter().all(|v| v.abs() <= 0.1));
            sum += s;
        }
        // uniform on [-r, r] has standard deviation r / sqrt(3)
        let bound = 3.0 * 0.1 / 3f64.sqrt() / (n as f64).sqrt();
        assert!((sum / n as f64).abs().max() <= bound);
    }

    #[test]
    fn vertex_law_hits_corners() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..100 {
            let s = sample_disturbance(&w_box(0.1), &mut rng, DisturbanceLaw::Vertex).unwrap();
            assert!(s.iter().all(|v| v.abs() == 0.1));
        }
    }

    #[test]
    fn non_box_disturbance_is_rejected() {
        let tri = HPolytope::new(
            nalgebra::DMatrix::from_row_slice(3, 2, &[-1.0, 0.0, 0.0, -1.0, 1.0, 1.0]),
            DVector::from_vec(vec![0.1, 0.1, 0.1]),
        )
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(sample_disturbance(&tri, &mut rng, DisturbanceLaw::Uniform).is_err());
    }

    #[test]
    fn grid_uses_cell_centres() {
        let g = GridSpec::new(0.05, vec![-1.5, -1.5], vec![0.5, 1.5]).unwrap();
        let pts = g.points();
        assert_eq!(pts.len(), 40 * 60);
        assert!((pts[0][0] + 1.475).abs() < 1e-12 && (pts[0][1] + 1.475).abs() < 1e-12);
        assert!((pts[1][0] + 1.425).abs() < 1e-12);
        assert!(GridSpec::new(0.0, vec![0.0], vec![1.0]).is_err());
    }

    #[test]
    fn bench_statistics() {
        let t: Vec<Duration> = [4, 1, 3, 2].iter().map(|&ms| Duration::from_millis(ms)).collect();
        let row = BenchRow::from_times("x", &t);
        assert!((row.mean_ms - 2.5).abs() < 1e-12);
        assert!((row.median_ms - 2.5).abs() < 1e-12);
        assert!((row.p95_ms - 4.0).abs() < 1e-12);
    }

    #[test]
    fn trajectory_csv_layout() {
        let mut log = TrajectoryLog::new(3);
        log.config_hash = "abc".into();
        log.seed = 9;
        log.records.push(StepRecord {
            k: 0,
            x: DVector::from_vec(vec![1.0, 2.0]),
            u: DVector::from_vec(vec![0.5]),
            w: DVector::from_vec(vec![0.0, -0.1]),
            lambda: vec![0.25, 0.75],
            objective: 3.0,
            solve_time: Duration::from_micros(1500),
            event: MemoryEvent::Insert(1),
        });
        let mut buf = Vec::new();
        write_trajectory_csv(&log, 2, 1, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "# config_hash: abc seed: 9");
        assert_eq!(
            lines[1],
            "k,x1,x2,u1,w1,w2,lambda_0,lambda_1,lambda_2,objective,solve_time_ms,mem_event"
        );
        let cells: Vec<&str> = lines[2].split(',').collect();
        assert_eq!(cells.len(), 12);
        assert_eq!(cells[6].parse::<f64>().unwrap(), 0.25);
        assert_eq!(cells[8].parse::<f64>().unwrap(), 0.0);
        assert_eq!(cells[11], "insert(1)");
        // 17 significant digits survive the round trip
        assert_eq!(fmt_f64(0.1).parse::<f64>().unwrap(), 0.1);
        assert_eq!(fmt_f64(0.1), "1.0000000000000001e-1");
        assert_eq!(fmt_f64(-0.0), "0.0000000000000000e0");
    }
}
