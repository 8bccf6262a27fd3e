use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Parser, Subcommand};
use reed_core::{Error, Result};
use serde::de::DeserializeOwned;
use reed_store::manager::ManagerConfig;
use reed_store::{net, DedupStore, StoreConfig};

#[derive(Parser)]
#[command(name = "reed-server", version, about = "Dedup store and key manager daemons")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the dedup store.
    Store {
        /// TOML file with listen, data_root, key_root and container_size.
        #[arg(long, short)]
        config: Option<PathBuf>,
        #[arg(long)]
        listen: Option<String>,
        #[arg(long)]
        data_root: Option<PathBuf>,
        #[arg(long)]
        key_root: Option<PathBuf>,
        #[arg(long, value_parser = reed_cli::parse_size)]
        container_size: Option<u64>,
    },
    /// Run the key manager.
    Manager {
        /// TOML file with listen, key_file, modulus_bits, rate_capacity,
        /// rate_refill_per_sec and batch_cap.
        #[arg(long, short)]
        config: Option<PathBuf>,
        #[arg(long)]
        listen: Option<String>,
        /// Created with a fresh key on first start.
        #[arg(long)]
        key_file: Option<PathBuf>,
        #[arg(long)]
        rate_capacity: Option<u64>,
        #[arg(long)]
        rate_refill: Option<f64>,
    },
}

fn read_toml<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::InvalidConfig(format!("{}: {e}", path.display())))?;
    toml::from_str(&text).map_err(|e| Error::InvalidConfig(format!("{}: {e}", path.display())))
}

fn bind(addr: &str) -> Result<TcpListener> {
    TcpListener::bind(addr).map_err(|e| Error::Transport(format!("bind {addr}: {e}")))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Store {
            config,
            listen,
            data_root,
            key_root,
            container_size,
        } => {
            let mut cfg = match (&config, &data_root, &key_root) {
                (Some(path), _, _) => read_toml::<StoreConfig>(path)?,
                (None, Some(d), Some(k)) => StoreConfig::new(d, k),
                _ => return Err(Error::InvalidConfig("give --config or both --data-root and --key-root".into())),
            };
            if let Some(d) = data_root {
                cfg.data_root = d;
            }
            if let Some(k) = key_root {
                cfg.key_root = k;
            }
            if let Some(l) = listen {
                cfg.listen = l;
            }
            if let Some(c) = container_size {
                cfg.container_size = c;
            }
            let store = Arc::new(DedupStore::open(&cfg)?);
            let listener = bind(&cfg.listen)?;
            eprintln!("store listening on {}", listener.local_addr()?);
            net::serve_store(listener, store);
            Ok(())
        }
        Command::Manager {
            config,
            listen,
            key_file,
            rate_capacity,
            rate_refill,
        } => {
            let mut cfg = match (&config, &key_file) {
                (Some(path), _) => read_toml::<ManagerConfig>(path)?,
                (None, Some(k)) => ManagerConfig::new(k),
                _ => return Err(Error::InvalidConfig("give --config or --key-file".into())),
            };
            if let Some(k) = key_file {
                cfg.key_file = k;
            }
            if let Some(l) = listen {
                cfg.listen = l;
            }
            if let Some(c) = rate_capacity {
                cfg.rate_capacity = c;
            }
            if let Some(r) = rate_refill {
                cfg.rate_refill_per_sec = r;
            }
            let manager = Arc::new(cfg.build()?);
            let listener = bind(&cfg.listen)?;
            eprintln!("key manager listening on {}", listener.local_addr()?);
            net::serve_keys(listener, manager);
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match reed_cli::parse_args::<Cli>() {
        Ok(cli) => reed_cli::finish(run(cli)),
        Err(code) => code,
    }
}
