//! Command-line front end: argument parsing, PGM/CSV I/O and reports.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use crate::baselines::{jpeg_level, svd_level};
use crate::error::{Error, Result};
use crate::evalmetrics::{affine_rel_error, grad_energy, mult_noise, MemoryAccount, NoiseSpec};
use crate::matcore::{DenseMatrix, NonNegMatrix};
use crate::mla::{mla_run, quantize_factors, smax, LevelResult, MlaConfig};
use crate::ranktheory::{
    log_simple_bound, log_sum_terms, log_term, p_hat, p_opt, p_opt_expanded, p_stationary, term_ratio, RankParams,
};
use crate::ssnewton::SsnConfig;
use crate::trifactor::{select_p_tilde, sigma_sort, truncate, two_stage, write_archive};

#[derive(Debug, Parser)]
#[command(name = "nmf-mla", version, about = "Sparse nonnegative tri-factorisation and multi-level analysis")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Tri-factorise one image or matrix.
    Factor(FactorArgs),
    /// Multi-level analysis with per-level reports.
    Mla(MlaArgs),
    /// Per-level comparison with the SVD and DCT baselines.
    Compare(MlaArgs),
    /// Rank-selection table.
    Rank(RankArgs),
    /// Apply multiplicative noise to an image or matrix.
    Noise(NoiseArgs),
    /// Affine-invariant error of a reconstruction against a reference.
    Metrics(MetricsArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Preset {
    /// α = 0.2, ν = 0, γ = 0.02, p = 5, p̃ = 3.
    Dsm,
}

#[derive(Debug, Clone, Args)]
pub struct SolverArgs {
    /// ℓ1 weight on A [default: 0.2]
    #[arg(long)]
    pub alpha: Option<f64>,
    /// ℓ1 weight on P [default: 0.02]
    #[arg(long)]
    pub nu: Option<f64>,
    /// Orthogonality weight [default: 0.02]
    #[arg(long)]
    pub gamma: Option<f64>,
    #[arg(long, default_value_t = 200)]
    pub max_iter: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

impl SolverArgs {
    fn config(&self, preset: Option<Preset>) -> SsnConfig {
        let base = match preset {
            Some(Preset::Dsm) => SsnConfig::with_weights(0.2, 0.0, 0.02),
            None => SsnConfig::default(),
        };
        SsnConfig {
            alpha: self.alpha.unwrap_or(base.alpha),
            nu: self.nu.unwrap_or(base.nu),
            gamma: self.gamma.unwrap_or(base.gamma),
            max_iter: self.max_iter,
            seed: self.seed,
            ..base
        }
    }
}

#[derive(Debug, Clone, Args)]
pub struct FactorArgs {
    /// PGM (P2/P5) or CSV input.
    #[arg(long)]
    pub input: PathBuf,
    /// Rank p [default: 5]
    #[arg(long)]
    pub p: Option<usize>,
    /// Kept terms; chosen by K2 when omitted.
    #[arg(long)]
    pub p_tilde: Option<usize>,
    #[arg(long, default_value_t = 0.95)]
    pub k2: f64,
    #[arg(long, default_value_t = 0.01)]
    pub quant_step: f64,
    #[arg(long, value_enum)]
    pub preset: Option<Preset>,
    #[command(flatten)]
    pub solver: SolverArgs,
    #[arg(long, default_value = ".")]
    pub out_dir: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct MlaArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long, default_value_t = 2)]
    pub r: usize,
    #[arg(long, default_value_t = 3)]
    pub s_offset: usize,
    #[arg(long, default_value_t = 3.5)]
    pub k1: f64,
    #[arg(long, default_value_t = 0.95)]
    pub k2: f64,
    #[arg(long, default_value_t = 0.01)]
    pub quant_step: f64,
    /// Multiplicative noise level for the noisy columns.
    #[arg(long, default_value_t = 0.25)]
    pub sigma: f64,
    #[arg(long, default_value_t = 0)]
    pub noise_seed: u64,
    #[command(flatten)]
    pub solver: SolverArgs,
    #[arg(long, default_value = ".")]
    pub out_dir: PathBuf,
}

impl MlaArgs {
    fn config(&self) -> Result<MlaConfig> {
        let cfg = MlaConfig {
            r: self.r,
            s_offset: self.s_offset,
            k1: self.k1,
            k2: self.k2,
            quant_step: self.quant_step,
            solver: self.solver.config(None),
            noise: Some(NoiseSpec::new(self.sigma, self.noise_seed)?),
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, Args)]
pub struct RankArgs {
    #[arg(long)]
    pub n: usize,
    #[arg(long)]
    pub m: usize,
    #[arg(long, default_value_t = 0.01)]
    pub delta: f64,
    #[arg(long, default_value_t = 2.0)]
    pub k: f64,
    #[arg(long, default_value_t = 1.0)]
    pub c3: f64,
    #[arg(long, default_value_t = 0.1)]
    pub eta: f64,
    #[arg(long, default_value_t = 20)]
    pub l_max: usize,
    /// CSV destination; standard output when omitted.
    #[arg(long)]
    pub output: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct NoiseArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long, default_value_t = 0.25)]
    pub sigma: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// PGM or CSV, by extension.
    #[arg(long)]
    pub output: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct MetricsArgs {
    /// Reconstruction.
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub reference: PathBuf,
    /// Also report the difference-gradient energy of the reference over
    /// blocks of this size.
    #[arg(long)]
    pub block: Option<usize>,
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Factor(a) => cmd_factor(&a),
        Command::Mla(a) => cmd_mla(&a),
        Command::Compare(a) => cmd_compare(&a),
        Command::Rank(a) => cmd_rank(&a),
        Command::Noise(a) => cmd_noise(&a),
        Command::Metrics(a) => cmd_metrics(&a),
    }
}

#[derive(Debug, Serialize)]
struct FactorReport {
    p: usize,
    p_tilde: usize,
    rel_error: f64,
    memory_ratio: f64,
}

pub fn cmd_factor(args: &FactorArgs) -> Result<()> {
    let y = NonNegMatrix::new(read_matrix(&args.input)?)?;
    let cfg = args.solver.config(args.preset);
    let dsm = args.preset == Some(Preset::Dsm);
    let p = args.p.unwrap_or(5);
    let tf = two_stage(&y, p, &cfg)?;
    let p_tilde = match args.p_tilde {
        Some(v) => v,
        None if dsm => 3.min(p * p),
        None => select_p_tilde(&sigma_sort(&tf.sigma), args.k2)?,
    };
    let ttf = quantize_factors(&truncate(&tf, p_tilde)?, args.quant_step)?;
    let rec = ttf.reconstruct();
    let report = FactorReport {
        p,
        p_tilde,
        rel_error: affine_rel_error(&rec, &y)?,
        memory_ratio: MemoryAccount::for_trifactor(&ttf, args.quant_step, y.rows() * y.cols())?.ratio(),
    };
    fs::create_dir_all(&args.out_dir)?;
    fs::write(args.out_dir.join("factors.trifact"), write_archive(&ttf, args.quant_step)?)?;
    write_pgm(&args.out_dir.join("reconstruction.pgm"), &rec)?;
    write_json(&args.out_dir.join("report.json"), &report)
}

#[derive(Debug, Serialize)]
struct MlaRow {
    level: usize,
    p: usize,
    p_tilde: usize,
    memory_ratio_nmf: f64,
    rel_error_clean: f64,
    rel_error_noisy: f64,
}

pub fn cmd_mla(args: &MlaArgs) -> Result<()> {
    let y = NonNegMatrix::new(read_matrix(&args.input)?)?;
    let levels = mla_run(&y, &args.config()?)?;
    fs::create_dir_all(&args.out_dir)?;
    let mut table = csv::Writer::from_path(args.out_dir.join("mla.csv")).map_err(csv_err)?;
    for l in &levels {
        if let Some(rec) = &l.reconstruction {
            write_pgm(&args.out_dir.join(format!("level_{}.pgm", l.s)), rec)?;
        }
        write_json(&args.out_dir.join(format!("level_{}.json", l.s)), &l.report())?;
        table.serialize(mla_row(l)).map_err(csv_err)?;
    }
    table.flush()?;
    Ok(())
}

fn mla_row(l: &LevelResult) -> MlaRow {
    MlaRow {
        level: l.s,
        p: l.p,
        p_tilde: l.p_tilde,
        memory_ratio_nmf: l.memory_ratio,
        rel_error_clean: l.rel_error,
        rel_error_noisy: l.rel_error_noisy.unwrap_or(f64::NAN),
    }
}

#[derive(Debug, Serialize)]
struct CompareRow {
    level: usize,
    method: &'static str,
    memory_ratio: f64,
    rel_error_clean: f64,
    rel_error_noisy: f64,
}

pub fn cmd_compare(args: &MlaArgs) -> Result<()> {
    let y = NonNegMatrix::new(read_matrix(&args.input)?)?;
    let cfg = args.config()?;
    let noise = NoiseSpec::new(args.sigma, args.noise_seed)?;
    let total = y.rows() * y.cols();
    let mut rows = Vec::new();
    for l in mla_run(&y, &cfg)? {
        let r = mla_row(&l);
        rows.push(CompareRow {
            level: l.s,
            method: "nmf",
            memory_ratio: r.memory_ratio_nmf,
            rel_error_clean: r.rel_error_clean,
            rel_error_noisy: r.rel_error_noisy,
        });
    }
    let top = smax(y.cols(), y.rows(), args.r, args.s_offset);
    for s in (1..=top).rev() {
        let clean = svd_level(&y, s, args.r, args.quant_step, None)?;
        let noisy = svd_level(&y, s, args.r, args.quant_step, Some(&noise))?;
        rows.push(CompareRow {
            level: s,
            method: "svd",
            memory_ratio: MemoryAccount::new(clean.stored_values, total)?.ratio(),
            rel_error_clean: affine_rel_error(&clean.reconstruction, &y)?,
            rel_error_noisy: affine_rel_error(&noisy.reconstruction, &y)?,
        });
    }
    for s in (0..=3).rev() {
        let clean = jpeg_level(&y, s, None)?;
        let noisy = jpeg_level(&y, s, Some(&noise))?;
        rows.push(CompareRow {
            level: s,
            method: "jpeg",
            memory_ratio: MemoryAccount::new(clean.stored_values, total)?.ratio(),
            rel_error_clean: affine_rel_error(&clean.reconstruction, &y)?,
            rel_error_noisy: affine_rel_error(&noisy.reconstruction, &y)?,
        });
    }
    fs::create_dir_all(&args.out_dir)?;
    let mut table = csv::Writer::from_path(args.out_dir.join("compare.csv")).map_err(csv_err)?;
    for r in rows {
        table.serialize(r).map_err(csv_err)?;
    }
    table.flush()?;
    Ok(())
}

#[derive(Debug, Serialize)]
struct RankRow {
    l: usize,
    log_term: f64,
    term_ratio: f64,
    log_sum: f64,
    log_simple_bound: f64,
    p_opt: f64,
    p_opt_expanded: f64,
    p_stationary: f64,
    p_hat: usize,
}

pub fn cmd_rank(args: &RankArgs) -> Result<()> {
    let params = RankParams::new(args.n, args.m, args.delta, args.k, args.c3, args.eta)?;
    if args.l_max == 0 {
        return Err(Error::InvalidParam("l_max must be positive".into()));
    }
    let popt = p_opt(&params)?;
    let pexp = p_opt_expanded(&params).unwrap_or(f64::NAN);
    let pst = p_stationary(&params)?;
    let lc = params.log_c3eps();
    let phat = p_hat(args.n, args.m, args.eta, lc, args.l_max)?;
    let sink: Box<dyn Write> = match &args.output {
        Some(path) => Box::new(BufWriter::new(fs::File::create(path)?)),
        None => Box::new(std::io::stdout().lock()),
    };
    let mut table = csv::Writer::from_writer(sink);
    for l in 1..=args.l_max {
        table
            .serialize(RankRow {
                l,
                log_term: log_term(l, args.n, args.m, lc),
                term_ratio: term_ratio(l, args.n, args.m, lc),
                log_sum: log_sum_terms(l, args.n, args.m, lc),
                log_simple_bound: log_simple_bound(l, args.n, args.m, lc),
                p_opt: popt,
                p_opt_expanded: pexp,
                p_stationary: pst,
                p_hat: phat,
            })
            .map_err(csv_err)?;
    }
    table.flush()?;
    Ok(())
}

pub fn cmd_noise(args: &NoiseArgs) -> Result<()> {
    let x = read_matrix(&args.input)?;
    let out = mult_noise(&x, &NoiseSpec::new(args.sigma, args.seed)?);
    write_matrix(&args.output, &out)
}

#[derive(Debug, Serialize)]
struct MetricsReport {
    rel_error: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    grad_energy: Option<f64>,
}

pub fn cmd_metrics(args: &MetricsArgs) -> Result<()> {
    let i = read_matrix(&args.input)?;
    let y = read_matrix(&args.reference)?;
    let report = MetricsReport {
        rel_error: affine_rel_error(&i, &y)?,
        grad_energy: args.block.map(|b| grad_energy(&y, b)).transpose()?,
    };
    println!("{}", serde_json::to_string_pretty(&report).map_err(|e| Error::Parse(e.to_string()))?);
    Ok(())
}

fn csv_err(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::Parse(format!("{other:?}")),
    }
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::Parse(e.to_string()))?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

fn is_pgm(path: &Path) -> bool {
    path.extension().is_some_and(|e| e.eq_ignore_ascii_case("pgm"))
}

/// PGM when the extension is `.pgm`, CSV otherwise.
pub fn read_matrix(path: &Path) -> Result<DenseMatrix> {
    if is_pgm(path) {
        read_pgm(path)
    } else {
        read_csv_matrix(path)
    }
}

pub fn write_matrix(path: &Path, x: &DenseMatrix) -> Result<()> {
    if is_pgm(path) {
        write_pgm(path, x)
    } else {
        write_csv_matrix(path, x)
    }
}

/// 8-bit P2 or P5; samples are divided by the header's maxval.
pub fn read_pgm(path: &Path) -> Result<DenseMatrix> {
    parse_pgm(&fs::read(path)?)
}

pub fn parse_pgm(bytes: &[u8]) -> Result<DenseMatrix> {
    let bad = |msg: &str| Error::Parse(format!("PGM: {msg}"));
    let mut pos = 0;
    let token = |pos: &mut usize| -> Option<String> {
        loop {
            while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
                *pos += 1;
            }
            if *pos < bytes.len() && bytes[*pos] == b'#' {
                while *pos < bytes.len() && bytes[*pos] != b'\n' {
                    *pos += 1;
                }
                continue;
            }
            break;
        }
        let start = *pos;
        while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        (start < *pos).then(|| String::from_utf8_lossy(&bytes[start..*pos]).into_owned())
    };
    let magic = token(&mut pos).ok_or_else(|| bad("empty file"))?;
    let num = |pos: &mut usize, what: &str| -> Result<usize> {
        token(pos).and_then(|t| t.parse().ok()).ok_or_else(|| bad(&format!("bad {what}")))
    };
    let w = num(&mut pos, "width")?;
    let h = num(&mut pos, "height")?;
    let maxval = num(&mut pos, "maxval")?;
    if maxval == 0 || maxval > 255 {
        return Err(bad("only 8-bit images are supported"));
    }
    let scale = maxval as f64;
    let data: Vec<f64> = match magic.as_str() {
        "P2" => (0..w * h)
            .map(|_| num(&mut pos, "sample").map(|v| v.min(maxval) as f64 / scale))
            .collect::<Result<_>>()?,
        "P5" => {
            // A single whitespace byte separates the header from the raster.
            let start = pos + 1;
            let raster = bytes.get(start..start + w * h).ok_or_else(|| bad("truncated raster"))?;
            raster.iter().map(|&b| f64::from(b).min(scale) / scale).collect()
        }
        _ => return Err(bad(&format!("unsupported magic {magic}"))),
    };
    DenseMatrix::new(h, w, data)
}

/// Binary P5, values clamped to `[0, 1]` and rounded to 8 bits.
pub fn write_pgm(path: &Path, x: &DenseMatrix) -> Result<()> {
    let mut out = format!("P5\n{} {}\n255\n", x.cols(), x.rows()).into_bytes();
    out.extend(x.as_slice().iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    fs::write(path, out)?;
    Ok(())
}

/// Headerless numeric CSV, one matrix row per record.
pub fn read_csv_matrix(path: &Path) -> Result<DenseMatrix> {
    let mut rd = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(csv_err)?;
    let mut rows = Vec::new();
    for rec in rd.records() {
        let rec = rec.map_err(csv_err)?;
        let row = rec
            .iter()
            .map(|f| f.parse::<f64>().map_err(|_| Error::Parse(format!("CSV: bad number {f:?}"))))
            .collect::<Result<Vec<_>>>()?;
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(Error::Parse("CSV: no rows".into()));
    }
    DenseMatrix::from_rows(&rows)
}

pub fn write_csv_matrix(path: &Path, x: &DenseMatrix) -> Result<()> {
    let mut wr = csv::WriterBuilder::new().has_headers(false).from_path(path).map_err(csv_err)?;
    for i in 0..x.rows() {
        wr.write_record(x.row(i).iter().map(|v| v.to_string())).map_err(csv_err)?;
    }
    wr.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::{prop_assert_eq, proptest};

    #[test]
    fn parse_ascii_pgm_with_comments() {
        let text = b"P2\n# comment\n3 2\n255\n0 128 255\n# mid\n1 2 3\n";
        let m = parse_pgm(text).unwrap();
        assert_eq!(m.shape(), (2, 3));
        assert_eq!(m[(0, 1)], 128.0 / 255.0);
        assert_eq!(m[(1, 2)], 3.0 / 255.0);
        assert!(parse_pgm(b"P6\n1 1\n255\n\0").is_err());
        assert!(parse_pgm(b"P5\n4 4\n255\n\0\0").is_err());
        assert!(parse_pgm(b"P2\n1 1\n65535\n7").is_err());
    }

    #[test]
    fn dsm_preset_values() {
        let s = SolverArgs {
            alpha: None,
            nu: None,
            gamma: None,
            max_iter: 200,
            seed: 0,
        };
        let c = s.config(Some(Preset::Dsm));
        assert_eq!((c.alpha, c.nu, c.gamma), (0.2, 0.0, 0.02));
        let c = SolverArgs { nu: Some(0.5), ..s }.config(Some(Preset::Dsm));
        assert_eq!(c.nu, 0.5);
    }

    proptest! {
        #[test]
        fn pgm_roundtrip(w in 1usize..12, h in 1usize..12, seed in 0u64..1000) {
            let dir = tempfile::tempdir().unwrap();
            let path = dir.path().join("x.pgm");
            let x = DenseMatrix::from_fn(h, w, |i, j| ((i * 31 + j * 17 + seed as usize) % 256) as f64 / 255.0);
            write_pgm(&path, &x).unwrap();
            let back = read_pgm(&path).unwrap();
            prop_assert_eq!(&back, &x);
        }

        #[test]
        fn csv_roundtrip(w in 1usize..6, h in 1usize..6, seed in 0u64..1000) {
            let dir = tempfile::tempdir().unwrap();
            let path = dir.path().join("x.csv");
            let x = DenseMatrix::from_fn(h, w, |i, j| ((i + 1) as f64 * 0.1 + j as f64 / 7.0 + seed as f64).sqrt());
            write_csv_matrix(&path, &x).unwrap();
            prop_assert_eq!(read_csv_matrix(&path).unwrap(), x);
        }
    }
}
