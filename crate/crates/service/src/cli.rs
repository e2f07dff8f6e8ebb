//! Command-line entry points.

use std::fs;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};

use archplate_core::constitutive::Material;
use archplate_core::design_search::{beam_search, Evaluator, FemEvaluator, ProxyEvaluator, SearchConfig};
use archplate_core::lattice_graph::LatticeGraph;
use archplate_core::mesh_forge::MeshConfig;
use archplate_core::world_env::{
    create_session, export_trajectory, gen_action_sequence, generate_dataset, Action, Geometry, Regime, SequenceKind,
    SessionSpec,
};
use clap::{Parser, Subcommand, ValueEnum};
use thiserror::Error;

use crate::protocol::EvaluatorKind;
use crate::server::{serve, DEFAULT_BIND};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{path}: {source}")]
    Read { path: PathBuf, source: std::io::Error },
    #[error("{path}: {message}")]
    Parse { path: PathBuf, message: String },
    #[error("invalid bind address {0}")]
    Bind(String),
    #[error(transparent)]
    Env(#[from] archplate_core::world_env::EnvError),
    #[error(transparent)]
    Search(#[from] archplate_core::design_search::SearchError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Parser)]
#[command(name = "archplate", version, about = "Lattice plate simulation, datasets, design search and the session server")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum RegimeArg {
    Quasistatic,
    Dynamic,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum SequenceArg {
    Random,
    LoadReverse,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum EvaluatorArg {
    Fem,
    Proxy,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Roll out one action sequence and write the trajectory file.
    Simulate {
        #[arg(long)]
        graph: PathBuf,
        /// Material parameter JSON.
        #[arg(long)]
        material: PathBuf,
        /// JSON array of 4-component actions; generated when absent.
        #[arg(long)]
        actions: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "random")]
        sequence: SequenceArg,
        #[arg(long, default_value_t = 30)]
        steps: usize,
        /// Defaults from the material density.
        #[arg(long, value_enum)]
        regime: Option<RegimeArg>,
        #[arg(long = "mesh-config")]
        mesh_config: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate random-action trajectories over every graph in a directory.
    Dataset {
        #[arg(long)]
        graphs: PathBuf,
        #[arg(long, default_value_t = 10)]
        trajectories: usize,
        #[arg(long, default_value_t = 30)]
        steps: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Neo-Hookean defaults when absent.
        #[arg(long)]
        material: Option<PathBuf>,
        #[arg(long = "mesh-config")]
        mesh_config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Beam search from a seed graph; writes the candidate log as JSON lines.
    Search {
        #[arg(long)]
        seed: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "fem")]
        evaluator: EvaluatorArg,
        #[arg(long = "mesh-config")]
        mesh_config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the HTTP and WebSocket server.
    Serve {
        #[arg(long, env = "LEIA_BIND", default_value = DEFAULT_BIND)]
        bind: String,
        /// Directory for trajectories of closed sessions.
        #[arg(long)]
        data: Option<PathBuf>,
    },
}

fn read_text(path: &Path) -> Result<String, CliError> {
    fs::read_to_string(path).map_err(|source| CliError::Read { path: path.to_path_buf(), source })
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, CliError> {
    serde_json::from_str(&read_text(path)?).map_err(|e| CliError::Parse { path: path.to_path_buf(), message: e.to_string() })
}

fn read_graph(path: &Path) -> Result<LatticeGraph, CliError> {
    LatticeGraph::from_json(&read_text(path)?).map_err(|e| CliError::Parse { path: path.to_path_buf(), message: e.to_string() })
}

fn read_material(path: &Path) -> Result<Material, CliError> {
    Material::from_json(&read_text(path)?).map_err(|e| CliError::Parse { path: path.to_path_buf(), message: e.to_string() })
}

fn mesh_config(path: Option<&Path>) -> Result<MeshConfig, CliError> {
    path.map(read_json).transpose().map(Option::unwrap_or_default)
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Simulate { graph, material, actions, sequence, steps, regime, mesh_config: mc, seed, out } => {
            let graph = read_graph(&graph)?;
            let material = read_material(&material)?;
            let actions: Vec<Action> = match actions {
                Some(path) => read_json(&path)?,
                None => {
                    let kind = match sequence {
                        SequenceArg::Random => SequenceKind::Random,
                        SequenceArg::LoadReverse => SequenceKind::LoadReverse,
                    };
                    gen_action_sequence(kind, steps, seed, 1)?
                }
            };
            let regime = match regime {
                Some(RegimeArg::Quasistatic) => Regime::Quasistatic,
                Some(RegimeArg::Dynamic) => Regime::Dynamic,
                None if material.density() > 0.0 => Regime::Dynamic,
                None => Regime::Quasistatic,
            };
            let mut spec = SessionSpec::new(Geometry::Graph { graph, mesh: mesh_config(mc.as_deref())? }, material, regime);
            spec.seed = seed;
            let mut session = create_session(spec)?;
            let traj = session.rollout(&actions);
            export_trajectory(&traj, &out)?;
            let last = traj.frames.last().expect("a trajectory holds the rest frame");
            println!(
                "{} frames, {} nodes, total work {:.6e}{}",
                traj.frames.len(),
                traj.node_count(),
                last.total_work(),
                traj.meta.failure.as_deref().map(|f| format!(", stopped: {f}")).unwrap_or_default()
            );
        }
        Command::Dataset { graphs, trajectories, steps, seed, material, mesh_config: mc, out } => {
            let mut named = Vec::new();
            let mut paths: Vec<PathBuf> = fs::read_dir(&graphs)?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.extension().is_some_and(|x| x == "json"))
                .collect();
            paths.sort();
            for p in paths {
                let name = p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
                named.push((name, read_graph(&p)?));
            }
            let material = match material {
                Some(p) => read_material(&p)?,
                None => Material::NeoHookean(Default::default()),
            };
            let entries = generate_dataset(&named, &material, &mesh_config(mc.as_deref())?, trajectories, steps, seed, &out)?;
            let failed = entries.iter().filter(|e| e.failure.is_some()).count();
            println!("{} trajectories written to {} ({failed} with failures)", entries.len(), out.display());
        }
        Command::Search { seed, config, evaluator, mesh_config: mc, out } => {
            let graph = read_graph(&seed)?;
            let cfg: SearchConfig = config.as_deref().map(read_json).transpose()?.unwrap_or_default();
            let kind = match evaluator {
                EvaluatorArg::Fem => EvaluatorKind::Fem,
                EvaluatorArg::Proxy => EvaluatorKind::Proxy,
            };
            let eval: Box<dyn Evaluator> = match kind {
                EvaluatorKind::Fem => Box::new(FemEvaluator::new(mesh_config(mc.as_deref())?, &cfg)),
                EvaluatorKind::Proxy => Box::new(ProxyEvaluator::new(&cfg)),
            };
            let log = beam_search(&graph, eval.as_ref(), &cfg)?;
            let mut file = std::io::BufWriter::new(fs::File::create(&out)?);
            log.write_jsonl(&mut file)?;
            if let Some(w) = log.winner() {
                println!(
                    "{} candidates; winner {} with s = {:.6e} (seed {:.6e})",
                    log.candidates.len(),
                    w.id,
                    w.score.unwrap_or(f64::NAN),
                    log.candidates[0].score.unwrap_or(f64::NAN)
                );
            }
        }
        Command::Serve { bind, data } => {
            let addr: SocketAddr = bind.parse().map_err(|_| CliError::Bind(bind.clone()))?;
            tokio::runtime::Runtime::new()?.block_on(serve(addr, data))?;
        }
    }
    Ok(())
}
