//! Datagram front end for a [`Dpu`].

use std::collections::HashMap;
use std::io;
use std::net::{SocketAddr, UdpSocket};
use std::sync::atomic::{AtomicBool, Ordering};
use std::time::{Duration, Instant};

use crate::dpu::Dpu;
use crate::sim::RunMode;
use crate::wire::{HEADER_LEN, MAX_PAYLOAD};

const POLL: Duration = Duration::from_millis(20);

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ServeStats {
    pub received: u64,
    pub sent: u64,
}

/// Serves datagrams until `stop` is set.
///
/// In virtual mode every request is handled as soon as it arrives and the
/// virtual clock jumps. In realtime mode the clock follows the wall clock
/// (divided by `scale`) and responses are held back until their virtual
/// delivery time.
pub fn serve(
    socket: &UdpSocket,
    dpu: &mut Dpu,
    mode: RunMode,
    stop: &AtomicBool,
) -> io::Result<ServeStats> {
    socket.set_read_timeout(Some(POLL))?;
    let mut buf = vec![0u8; HEADER_LEN + MAX_PAYLOAD + 1];
    let mut peers: HashMap<u64, SocketAddr> = HashMap::new();
    let mut stats = ServeStats::default();
    let origin = Instant::now();
    let base = dpu.now();
    let virtual_now = |scale: f64| base + (origin.elapsed().as_nanos() as f64 / scale) as u64;
    while !stop.load(Ordering::Relaxed) {
        match socket.recv_from(&mut buf) {
            Ok((n, peer)) => {
                stats.received += 1;
                let at = match mode {
                    RunMode::Virtual => dpu.now(),
                    RunMode::Realtime { scale } => virtual_now(scale),
                };
                let ticket = dpu.submit(buf[..n].to_vec(), at);
                peers.insert(ticket, peer);
            }
            Err(e)
                if matches!(
                    e.kind(),
                    io::ErrorKind::WouldBlock | io::ErrorKind::TimedOut
                ) => {}
            Err(e) => return Err(e),
        }
        while let Some(d) = dpu.step() {
            if let RunMode::Realtime { scale } = mode {
                let ahead = d.at.nanos().saturating_sub(virtual_now(scale).nanos());
                std::thread::sleep(Duration::from_nanos((ahead as f64 * scale) as u64));
            }
            if let Some(peer) = peers.remove(&d.ticket) {
                socket.send_to(&d.bytes, peer)?;
                stats.sent += 1;
            }
        }
    }
    Ok(stats)
}
