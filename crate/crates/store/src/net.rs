//! TCP endpoints: one thread per connection, one frame in, one frame out.

use std::io::{BufReader, BufWriter};
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::sync::Arc;
use std::thread::{self, JoinHandle};

use reed_core::keygen::KeyManager;
use reed_core::service::StoreService;
use reed_core::wire::{self, Request, Response};
use reed_core::Result;

fn serve_connection<F>(stream: TcpStream, handle: F)
where
    F: Fn(Request) -> Response,
{
    let peer = stream.peer_addr().map(|a| a.to_string()).unwrap_or_default();
    stream.set_nodelay(true).ok();
    let mut reader = BufReader::new(match stream.try_clone() {
        Ok(s) => s,
        Err(e) => {
            log::warn!("{peer}: {e}");
            return;
        }
    });
    let mut writer = BufWriter::new(stream);
    loop {
        let (ty, payload) = match wire::read_frame(&mut reader) {
            Ok(Some(frame)) => frame,
            Ok(None) => break,
            Err(e) => {
                log::debug!("{peer}: {e}");
                break;
            }
        };
        let resp = match Request::decode(ty, &payload) {
            Ok(req) => handle(req),
            Err(e) => Response::error(&e),
        };
        let (rty, rpayload) = resp.encode();
        if let Err(e) = wire::write_frame(&mut writer, rty, &rpayload) {
            log::debug!("{peer}: {e}");
            break;
        }
    }
}

fn accept_loop<F>(listener: TcpListener, handler: F)
where
    F: Fn(TcpStream) + Send + Sync + Clone + 'static,
{
    for stream in listener.incoming() {
        match stream {
            Ok(s) => {
                let h = handler.clone();
                thread::spawn(move || h(s));
            }
            Err(e) => log::warn!("accept: {e}"),
        }
    }
}

/// Serves the store until the listener fails.
pub fn serve_store<S: StoreService + 'static>(listener: TcpListener, store: Arc<S>) {
    accept_loop(listener, move |s| {
        let store = store.clone();
        serve_connection(s, |req| wire::handle_store(&*store, req));
    });
}

/// Serves key generation. Clients are told apart by peer IP address, which
/// is what the rate limiter keys on.
pub fn serve_keys(listener: TcpListener, manager: Arc<KeyManager>) {
    accept_loop(listener, move |s| {
        let client = s.peer_addr().map(|a| a.ip().to_string()).unwrap_or_default();
        let manager = manager.clone();
        serve_connection(s, |req| wire::handle_keygen(&manager, &client, req));
    });
}

/// Binds `addr` and serves the store on a background thread.
pub fn spawn_store<S: StoreService + 'static>(addr: &str, store: Arc<S>) -> Result<(SocketAddr, JoinHandle<()>)> {
    let listener = TcpListener::bind(addr)?;
    let local = listener.local_addr()?;
    Ok((local, thread::spawn(move || serve_store(listener, store))))
}

pub fn spawn_keys(addr: &str, manager: Arc<KeyManager>) -> Result<(SocketAddr, JoinHandle<()>)> {
    let listener = TcpListener::bind(addr)?;
    let local = listener.local_addr()?;
    Ok((local, thread::spawn(move || serve_keys(listener, manager))))
}
