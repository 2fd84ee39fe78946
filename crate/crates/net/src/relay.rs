//! Real-time channel relay: a UDP hop that pushes every datagram through one
//! shared [`EmulatedChannel`] on the system clock. Agents in separate
//! processes that all send via the relay contend for the same bottleneck.

use std::net::UdpSocket;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{mpsc, Arc, Mutex};
use std::thread::JoinHandle;
use std::time::Duration;

use sting_core::channel::{system_now_ns, ChannelConfig, ChannelStats, EmulatedChannel};
use tracing::{debug, warn};

use crate::udp::{decode_relay, encode_relay, resolve, wait_readable, MAX_DATAGRAM};

/// Longest blocking receive, bounding how late a due delivery can leave.
const MAX_WAIT: Duration = Duration::from_micros(500);

#[derive(Debug)]
pub struct ChannelRelay {
    addr: String,
    stop: Arc<AtomicBool>,
    reconfigure: mpsc::Sender<ChannelConfig>,
    stats: Arc<Mutex<ChannelStats>>,
    thread: Option<JoinHandle<()>>,
}

impl ChannelRelay {
    pub fn start(bind: &str, config: ChannelConfig) -> std::io::Result<ChannelRelay> {
        let socket = UdpSocket::bind(resolve(bind).map_err(std::io::Error::other)?)?;
        socket.set_nonblocking(true)?;
        let addr = socket.local_addr()?.to_string();
        let stop = Arc::new(AtomicBool::new(false));
        let stats = Arc::new(Mutex::new(ChannelStats::default()));
        let (tx, rx) = mpsc::channel();
        let thread = {
            let (stop, stats) = (stop.clone(), stats.clone());
            std::thread::Builder::new()
                .name("channel-relay".into())
                .spawn(move || relay_loop(socket, config, rx, stop, stats))?
        };
        Ok(ChannelRelay {
            addr,
            stop,
            reconfigure: tx,
            stats,
            thread: Some(thread),
        })
    }

    pub fn local_addr(&self) -> &str {
        &self.addr
    }

    /// Replaces the channel; packets still in flight are discarded.
    pub fn reconfigure(&self, config: ChannelConfig) {
        let _ = self.reconfigure.send(config);
    }

    pub fn stats(&self) -> ChannelStats {
        *self.stats.lock().expect("relay stats lock")
    }
}

impl Drop for ChannelRelay {
    fn drop(&mut self) {
        self.stop.store(true, Ordering::SeqCst);
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}

fn relay_loop(
    socket: UdpSocket,
    config: ChannelConfig,
    reconfigure: mpsc::Receiver<ChannelConfig>,
    stop: Arc<AtomicBool>,
    stats: Arc<Mutex<ChannelStats>>,
) {
    let mut channel = EmulatedChannel::new(config);
    let mut buf = vec![0u8; MAX_DATAGRAM];
    while !stop.load(Ordering::SeqCst) {
        if let Some(cfg) = reconfigure.try_iter().last() {
            debug!(?cfg, "relay channel reconfigured");
            channel = EmulatedChannel::new(cfg);
        }
        let now = system_now_ns();
        let wait = channel
            .next_delivery_ns()
            .map_or(MAX_WAIT, |t| Duration::from_nanos(t.saturating_sub(now)).min(MAX_WAIT))
            .max(Duration::from_micros(1));
        if let Err(e) = wait_readable(&socket, wait) {
            warn!(error = %e, "relay wait failed");
            return;
        }
        match socket.recv_from(&mut buf) {
            Ok((n, src)) => {
                let src = src.to_string();
                match decode_relay(&buf[..n]) {
                    Some((dst, wire, payload)) => {
                        channel.attach(&src);
                        channel.attach(dst);
                        let _ = channel.transmit(&src, dst, payload.to_vec(), wire, system_now_ns());
                    }
                    None => debug!(%src, "relay dropped malformed frame"),
                }
            }
            Err(e) if matches!(e.kind(), std::io::ErrorKind::WouldBlock | std::io::ErrorKind::TimedOut) => {}
            Err(e) if e.kind() == std::io::ErrorKind::ConnectionRefused => {}
            Err(e) => {
                warn!(error = %e, "relay socket failed");
                return;
            }
        }
        for d in channel.advance(system_now_ns()) {
            let Ok(frame) = encode_relay(&d.src, d.wire_bytes, &d.bytes) else { continue };
            if let Ok(dst) = resolve(&d.dst) {
                let _ = socket.send_to(&frame, dst);
            }
        }
        *stats.lock().expect("relay stats lock") = channel.stats();
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::udp::{RelayTransport, WaitTransport};
    use sting_core::channel::Transport;
    use sting_core::probe::HEADER_LEN;

    #[test]
    fn probe_crosses_relay_with_source_and_size_preserved() {
        let relay = ChannelRelay::start(
            "127.0.0.1:0",
            ChannelConfig {
                capacity_bps: 1_000_000_000,
                buffer_bytes: 1_000_000,
                propagation_ns: 0,
            },
        )
        .unwrap();
        let mut a = RelayTransport::bind("127.0.0.1:0", relay.local_addr()).unwrap();
        let mut b = RelayTransport::bind("127.0.0.1:0", relay.local_addr()).unwrap();
        a.send_probe(&b.local_addr(), &[9; HEADER_LEN], 1400).unwrap();
        let d = b.recv_timeout(Duration::from_secs(2)).unwrap().expect("delivery");
        assert_eq!(d.src, a.local_addr());
        assert_eq!(d.wire_bytes, 1400);
        assert_eq!(d.bytes, vec![9; HEADER_LEN]);
        assert_eq!(relay.stats().delivered, 1);
    }

    #[test]
    fn relay_serializes_at_channel_capacity() {
        // 20 x 1250 B at 10 Mbit/s occupy the medium for 20 ms.
        let relay = ChannelRelay::start(
            "127.0.0.1:0",
            ChannelConfig {
                capacity_bps: 10_000_000,
                buffer_bytes: 1_000_000,
                propagation_ns: 0,
            },
        )
        .unwrap();
        let mut a = RelayTransport::bind("127.0.0.1:0", relay.local_addr()).unwrap();
        let mut b = RelayTransport::bind("127.0.0.1:0", relay.local_addr()).unwrap();
        let t0 = std::time::Instant::now();
        for _ in 0..20 {
            a.send_probe(&b.local_addr(), &[0; HEADER_LEN], 1250).unwrap();
        }
        let mut got = 0;
        while got < 20 {
            if b.recv_timeout(Duration::from_secs(2)).unwrap().is_some() {
                got += 1;
            } else {
                panic!("relay lost packets");
            }
        }
        assert!(t0.elapsed() >= Duration::from_millis(19), "{:?}", t0.elapsed());
    }
}
