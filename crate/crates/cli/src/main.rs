//! `gaitfield` command-line front end.
//!
//! Exit codes: 0 success, 2 I/O, 3 malformed input, 4 configuration,
//! 5 numeric failure.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use gaitfield::checkpoint;
use gaitfield::config::{parse_dataset, parse_run_config};
use gaitfield::eval::{evaluate, SplitSpec};
use gaitfield::gff;
use gaitfield::gradcheck::{self, Scale};
use gaitfield::matching::{
    compute_field, verify_field, BranchConfig, FieldKind, GaitFeatureField, MatchingBranch, TextureSuppression,
};
use gaitfield::sequence::{encode_pgm_stack, load_feature_sequence, load_mask_sequence};
use gaitfield::synth::{synth_walkers, SyntheticWalkerSpec};
use gaitfield::train::{trace_csv, train};
use gaitfield::viz::{flow_color_encode, FlowColorMap};
use gaitfield::{Error, Result};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Parser)]
#[command(name = "gaitfield", version, about = "Gait feature fields from dense per-frame features")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Branch {
    Static,
    Dynamic,
}

#[derive(Subcommand)]
enum Command {
    /// Compute a static or dynamic gait feature field.
    Field {
        #[arg(long)]
        features: PathBuf,
        /// GFF with one channel, or concatenated binary PGM frames.
        #[arg(long)]
        masks: PathBuf,
        #[arg(long, value_enum)]
        branch: Branch,
        /// Half-height of the matching window (default 3, or the checkpoint's).
        #[arg(long)]
        dh: Option<usize>,
        #[arg(long)]
        dw: Option<usize>,
        /// Frame offset (default 0 for static, 1 for dynamic, or the checkpoint's).
        #[arg(long)]
        dl: Option<usize>,
        /// Encoded channels for random weights.
        #[arg(long, default_value_t = 16)]
        channels: usize,
        /// A checkpoint path, or `random:<seed>`.
        #[arg(long)]
        weights: String,
        #[arg(long)]
        out: PathBuf,
        /// Check bounds and background zeros before writing.
        #[arg(long)]
        verify: bool,
    },
    /// Randomly zero strong vectors of a static field.
    Suppress {
        #[arg(long)]
        field: PathBuf,
        #[arg(long, default_value_t = 0.5)]
        m: f64,
        #[arg(long, default_value_t = 0.5)]
        p: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train on a synthetic dataset; writes a checkpoint and a loss trace.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Loss trace CSV (default: the checkpoint path with `.loss.csv`).
        #[arg(long)]
        trace: Option<PathBuf>,
    },
    /// Rank-1 and rank-5 retrieval on a synthetic dataset.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        /// `synth:<key=value,...>`
        #[arg(long)]
        dataset: String,
        #[arg(long)]
        report: PathBuf,
    },
    /// Compare analytic gradients with central finite differences.
    Gradcheck {
        #[arg(long, default_value = "tiny")]
        scale: String,
        #[arg(long, default_value_t = 1e-5)]
        eps: f64,
    },
    /// Render one field frame as a flow-colour image (PNG or PPM by extension).
    Viz {
        #[arg(long)]
        field: PathBuf,
        #[arg(long, default_value_t = 0)]
        frame: usize,
        #[arg(long, default_value_t = 1.0)]
        maxmag: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write a synthetic walker dataset.
    Synth {
        #[arg(long, default_value_t = 8)]
        ids: usize,
        #[arg(long, default_value_t = 6)]
        seqs: usize,
        #[arg(long, default_value_t = 20)]
        frames: usize,
        #[arg(long, default_value_t = 32)]
        height: usize,
        #[arg(long, default_value_t = 16)]
        width: usize,
        #[arg(long, default_value_t = 4)]
        channels: usize,
        #[arg(long, default_value_t = 1.0)]
        noise: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Io { .. } => 2,
        Error::Format { .. } | Error::Shape(_) => 3,
        Error::Config(_) => 4,
        Error::Numeric(_) => 5,
    }
}

fn write_file(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    std::fs::write(path, bytes).map_err(|source| Error::Io { path: path.to_path_buf(), source })
}

fn load_branch(
    weights: &str,
    kind: FieldKind,
    in_channels: usize,
    channels: usize,
    window: (Option<usize>, Option<usize>, Option<usize>),
) -> Result<MatchingBranch> {
    let (dh, dw, dl) = window;
    if let Some(seed) = weights.strip_prefix("random:") {
        let seed: u64 = seed.parse().map_err(|_| Error::Config(format!("bad seed in `{weights}`")))?;
        let base = match kind {
            FieldKind::Static => BranchConfig::static_branch(),
            FieldKind::Dynamic => BranchConfig::dynamic_branch(),
        };
        let cfg = BranchConfig {
            in_channels,
            channels,
            delta_h: dh.unwrap_or(base.delta_h),
            delta_w: dw.unwrap_or(base.delta_w),
            delta_l: dl.unwrap_or(base.delta_l),
            ..base
        };
        if (kind == FieldKind::Static) != (cfg.delta_l == 0) {
            return Err(Error::Config("static fields need dl = 0, dynamic fields dl >= 1".into()));
        }
        return MatchingBranch::init(&cfg, &mut ChaCha8Rng::seed_from_u64(seed));
    }
    let model = checkpoint::load(Path::new(weights))?;
    let branch = match kind {
        FieldKind::Static => model.static_branch,
        FieldKind::Dynamic => model.dynamic_branch,
    };
    let have = (branch.template.delta_h(), branch.template.delta_w(), branch.delta_l);
    let want = (dh.unwrap_or(have.0), dw.unwrap_or(have.1), dl.unwrap_or(have.2));
    if want != have {
        return Err(Error::Config(format!("checkpoint branch has (dh, dw, dl) = {have:?}, requested {want:?}")));
    }
    Ok(branch)
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Field { features, masks, branch, dh, dw, dl, channels, weights, out, verify } => {
            let seq = load_feature_sequence(&features)?;
            let (h, w, c) = seq.frame_dims();
            let masks = load_mask_sequence(&masks, h, w)?;
            let kind = match branch {
                Branch::Static => FieldKind::Static,
                Branch::Dynamic => FieldKind::Dynamic,
            };
            let branch = load_branch(&weights, kind, c, channels, (dh, dw, dl))?;
            let field = compute_field(&seq, &masks, &branch)?;
            if verify {
                let query = masks.frames().frames(0, field.len());
                verify_field(&field, &query, &branch.template)?;
                eprintln!("verified {} frames", field.len());
            }
            gff::write(&out, &field.frames)
        }
        Command::Suppress { field, m, p, seed, out } => {
            let frames = gff::read(&field)?;
            let field = GaitFeatureField::new(FieldKind::Static, 0, frames)?;
            let sup = TextureSuppression::new(m, p)?;
            let (kept, keep) = sup.apply(&field, &mut ChaCha8Rng::seed_from_u64(seed))?;
            let zeroed = keep.data().iter().filter(|&&k| k == 0.0).count();
            eprintln!("zeroed {zeroed} of {} pixels", keep.data().len());
            gff::write(&out, &kept.frames)
        }
        Command::Train { config, out, trace } => {
            let text = std::fs::read_to_string(&config).map_err(|source| Error::Io { path: config.clone(), source })?;
            let run = parse_run_config(&text)?;
            let dataset = synth_walkers(&run.dataset)?;
            let outcome = train(&dataset, &run.split, &run.train)?;
            checkpoint::save(&outcome.model, &out)?;
            let trace_path = trace.unwrap_or_else(|| out.with_extension("loss.csv"));
            write_file(&trace_path, trace_csv(&outcome.trace))?;
            if let Some(last) = outcome.trace.last() {
                eprintln!("{} steps, final loss {:.6}", outcome.trace.len(), last.loss.total);
            }
            Ok(())
        }
        Command::Eval { ckpt, dataset, report } => {
            let model = checkpoint::load(&ckpt)?;
            let spec = parse_dataset(&dataset)?;
            let data = synth_walkers(&spec)?;
            let split = SplitSpec::standard(spec.seqs_per_id)?;
            let result = evaluate(&model, &data, &split)?;
            write_file(&report, result.to_key_values())?;
            print!("{}", result.to_table());
            Ok(())
        }
        Command::Gradcheck { scale, eps } => {
            let scale = Scale::parse(&scale)
                .ok_or_else(|| Error::Config(format!("unknown scale `{scale}`, expected tiny or small")))?;
            let results = gradcheck::run_all(scale, eps)?;
            let mut failed = 0;
            for r in &results {
                let verdict = if r.passed() { "ok" } else { "FAIL" };
                failed += usize::from(!r.passed());
                println!("{:<32} {:>6} coords  max rel err {:.3e}  {verdict}", r.name, r.coordinates, r.max_rel_error);
            }
            if failed > 0 {
                return Err(Error::Numeric(format!("{failed} of {} gradient checks failed", results.len())));
            }
            Ok(())
        }
        Command::Viz { field, frame, maxmag, out } => {
            let frames = gff::read(&field)?;
            let cmap = FlowColorMap::new(maxmag)?;
            flow_color_encode(&frames, frame, &cmap)?.save(&out)
        }
        Command::Synth { ids, seqs, frames, height, width, channels, noise, seed, out } => {
            let spec = SyntheticWalkerSpec {
                num_ids: ids,
                seqs_per_id: seqs,
                frames,
                height,
                width,
                channels,
                texture_noise_level: noise,
                seed,
                ..SyntheticWalkerSpec::default()
            };
            let data = synth_walkers(&spec)?;
            std::fs::create_dir_all(&out).map_err(|source| Error::Io { path: out.clone(), source })?;
            let mut index = String::from("features,masks,identity,sequence,sequence_id,covariate\n");
            for s in &data.samples {
                let stem = format!("id{:03}_seq{:02}", s.identity, s.sequence);
                let (fname, mname) = (format!("{stem}.gff"), format!("{stem}.pgm"));
                gff::write(&out.join(&fname), s.features.frames())?;
                write_file(&out.join(&mname), encode_pgm_stack(s.masks.frames()))?;
                let _ = writeln!(
                    index,
                    "{fname},{mname},{},{},{},{}",
                    s.identity,
                    s.sequence,
                    s.sequence_id,
                    s.covariate.tag()
                );
            }
            write_file(&out.join("index.csv"), index)?;
            write_file(&out.join("spec.txt"), format!("synth:{}\n", spec.to_spec_string()))
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(4) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
