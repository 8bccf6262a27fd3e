use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::OnceLock;

use clap::{Parser, Subcommand, ValueEnum};
use num_bigint::BigUint;
use reed_client::{Client, ClientConfig, Identity, RekeyMode};
use reed_core::chunker::ChunkingParams;
use reed_core::keygen::{ManagerPublicKey, DEFAULT_BATCH_CAP};
use reed_core::service::KeyService;
use reed_core::wire::{TcpTransport, WireKeys, WireStore};
use reed_core::{Error, FileId, Policy, Result, Scheme, StoreService};

#[derive(Parser)]
#[command(name = "reed", version, about = "Encrypted deduplicated storage client")]
struct Cli {
    /// Client configuration file.
    #[arg(long, short, global = true, default_value = "reed.toml")]
    config: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Create an identity (unless one exists) and register its public keys.
    KeygenRegister {
        #[arg(long)]
        user: String,
        /// Modulus size of the key-regression key pair.
        #[arg(long, default_value_t = reed_client::identity::DEFAULT_DERIVATION_BITS)]
        bits: usize,
    },
    /// Upload a file; prints its file id.
    Upload {
        path: PathBuf,
        /// Users allowed to read the file; the owner is always included.
        #[arg(long)]
        policy: String,
        #[arg(long, value_enum)]
        scheme: Option<SchemeArg>,
        /// Fixed-size chunks of the configured average size.
        #[arg(long, conflicts_with = "rabin")]
        fixed: bool,
        /// Content-defined chunks.
        #[arg(long)]
        rabin: bool,
        /// Name to store the file under; defaults to the path.
        #[arg(long)]
        name: Option<String>,
    },
    /// Download a file by id.
    Download {
        file_id: String,
        #[arg(short, long)]
        output: PathBuf,
    },
    /// Renew a file's key and replace its access policy.
    Rekey {
        file_id: String,
        #[arg(long)]
        policy: String,
        #[arg(long, value_enum, default_value_t = ModeArg::Lazy)]
        mode: ModeArg,
    },
    /// Print the server's storage counters.
    Stats,
}

#[derive(Clone, Copy, ValueEnum)]
enum SchemeArg {
    Basic,
    Enhanced,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ModeArg {
    Lazy,
    Active,
}

type Store = WireStore<TcpTransport>;

/// Connects to the key manager only when a key is first needed, so
/// commands that never request keys work without it.
struct LazyKeys {
    addr: String,
    inner: OnceLock<WireKeys<TcpTransport>>,
}

impl LazyKeys {
    fn get(&self) -> Result<&WireKeys<TcpTransport>> {
        if let Some(k) = self.inner.get() {
            return Ok(k);
        }
        let keys = WireKeys::connect(TcpTransport::connect(self.addr.clone())?, DEFAULT_BATCH_CAP)?;
        Ok(self.inner.get_or_init(|| keys))
    }
}

impl KeyService for LazyKeys {
    fn public_key(&self) -> Result<ManagerPublicKey> {
        self.get()?.public_key()
    }

    fn sign(&self, blinded: &[BigUint]) -> Result<Vec<BigUint>> {
        self.get()?.sign(blinded)
    }

    fn batch_cap(&self) -> usize {
        DEFAULT_BATCH_CAP
    }
}

fn store(cfg: &ClientConfig) -> Store {
    WireStore::new(TcpTransport::new(cfg.server.clone()))
}

fn client(cfg: &ClientConfig) -> Result<Client<Store, LazyKeys>> {
    let identity = Identity::load(&cfg.identity)?;
    let keys = LazyKeys {
        addr: cfg.manager.clone(),
        inner: OnceLock::new(),
    };
    Client::new(store(cfg), keys, identity, cfg.upload_options()?)
}

fn parse_id(s: &str) -> Result<FileId> {
    FileId::from_hex(s)
}

fn keygen_register(cfg: &ClientConfig, user: &str, bits: usize) -> Result<()> {
    let identity = if cfg.identity.exists() {
        let id = Identity::load(&cfg.identity)?;
        if id.user != user {
            return Err(Error::InvalidConfig(format!(
                "{} already holds the identity of {:?}",
                cfg.identity.display(),
                id.user
            )));
        }
        id
    } else {
        let id = Identity::generate(user, &mut rand::rngs::OsRng, bits)?;
        id.save(&cfg.identity)?;
        id
    };
    store(cfg).put_user(&identity.user, &identity.record().to_bytes())?;
    println!("registered {} ({})", identity.user, cfg.identity.display());
    Ok(())
}

fn upload(
    cfg: &ClientConfig,
    path: &Path,
    policy: &str,
    scheme: Option<SchemeArg>,
    fixed: bool,
    rabin: bool,
    name: Option<String>,
) -> Result<()> {
    let mut c = client(cfg)?;
    let mut opts = c.options().clone();
    if let Some(s) = scheme {
        opts.scheme = match s {
            SchemeArg::Basic => Scheme::Basic,
            SchemeArg::Enhanced => Scheme::Enhanced,
        };
    }
    let avg = cfg.chunk.avg_size;
    if fixed {
        opts.chunking = ChunkingParams::fixed(avg);
    } else if rabin {
        opts.chunking = ChunkingParams::rabin(avg / 4, avg, avg * 2);
    }
    c.set_options(opts)?;
    let name = name.unwrap_or_else(|| path.to_string_lossy().into_owned());
    let report = c.upload_file(path, &name, &Policy::parse(policy)?)?;
    eprintln!(
        "{} bytes, {} chunks, {} segments, {} new package bytes",
        report.size, report.chunks, report.segments, report.new_bytes
    );
    println!("{}", report.file_id);
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let cfg = ClientConfig::load(&cli.config)?;
    match cli.command {
        Command::KeygenRegister { user, bits } => keygen_register(&cfg, &user, bits),
        Command::Upload {
            path,
            policy,
            scheme,
            fixed,
            rabin,
            name,
        } => upload(&cfg, &path, &policy, scheme, fixed, rabin, name),
        Command::Download { file_id, output } => {
            let n = client(&cfg)?.download_file(&parse_id(&file_id)?, &output)?;
            eprintln!("{n} bytes written to {}", output.display());
            Ok(())
        }
        Command::Rekey { file_id, policy, mode } => {
            let mode = match mode {
                ModeArg::Lazy => RekeyMode::Lazy,
                ModeArg::Active => RekeyMode::Active,
            };
            let v = client(&cfg)?.rekey(&parse_id(&file_id)?, &Policy::parse(&policy)?, mode)?;
            println!("{v}");
            Ok(())
        }
        Command::Stats => {
            let s = store(&cfg).stats()?;
            println!("logical\t{}", s.logical_bytes);
            println!("physical\t{}", s.physical_bytes);
            println!("stub\t{}", s.stub_bytes);
            println!("containers\t{}", s.containers);
            println!("index_entries\t{}", s.index_entries);
            println!("saving\t{:.6}", s.saving());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match reed_cli::parse_args::<Cli>() {
        Ok(cli) => reed_cli::finish(run(cli)),
        Err(code) => code,
    }
}
