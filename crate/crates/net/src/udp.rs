//! Datagram transports over real sockets: plain UDP, and UDP through a
//! channel relay that imposes the emulated bottleneck in real time.

use std::io::ErrorKind;
use std::net::{SocketAddr, ToSocketAddrs, UdpSocket};
use std::time::Duration;

use sting_core::channel::{system_now_ns, Datagram, EmulatedEndpoint, Transport, TransportError};
use sting_core::probe::HEADER_LEN;

/// Largest datagram we accept; probe packets are at most one MTU.
pub const MAX_DATAGRAM: usize = 65_507;

/// A transport that can block until a datagram arrives, so the real-time
/// loop timestamps arrivals when they happen rather than at its next poll.
pub trait WaitTransport: Transport {
    fn recv_timeout(&mut self, timeout: Duration) -> Result<Option<Datagram>, TransportError>;
}

pub(crate) fn resolve(addr: &str) -> Result<SocketAddr, TransportError> {
    addr.to_socket_addrs()
        .ok()
        .and_then(|mut it| it.next())
        .ok_or_else(|| TransportError::BadAddress(addr.to_string()))
}

fn is_timeout(e: &std::io::Error) -> bool {
    matches!(e.kind(), ErrorKind::WouldBlock | ErrorKind::TimedOut)
}

/// Waits until `socket` is readable or `timeout` passes. Socket read
/// timeouts are rounded to scheduler ticks (several ms), far coarser than
/// packet spacing, so this uses `ppoll`'s high-resolution timer instead.
#[cfg(target_os = "linux")]
pub(crate) fn wait_readable(socket: &UdpSocket, timeout: Duration) -> std::io::Result<bool> {
    use std::os::fd::AsRawFd;
    let mut pfd = libc::pollfd {
        fd: socket.as_raw_fd(),
        events: libc::POLLIN,
        revents: 0,
    };
    let ts = libc::timespec {
        tv_sec: timeout.as_secs() as libc::time_t,
        tv_nsec: libc::c_long::from(timeout.subsec_nanos() as i32),
    };
    // SAFETY: one valid pollfd, a valid timespec and no signal mask.
    let n = unsafe { libc::ppoll(&mut pfd, 1, &ts, std::ptr::null()) };
    match n {
        n if n > 0 => Ok(true),
        0 => Ok(false),
        _ => {
            let e = std::io::Error::last_os_error();
            if e.kind() == ErrorKind::Interrupted {
                Ok(false)
            } else {
                Err(e)
            }
        }
    }
}

/// Portable fallback: short sleeps between non-blocking polls.
#[cfg(not(target_os = "linux"))]
pub(crate) fn wait_readable(socket: &UdpSocket, timeout: Duration) -> std::io::Result<bool> {
    const SLICE: Duration = Duration::from_micros(100);
    let deadline = std::time::Instant::now() + timeout;
    let mut probe = [0u8; 1];
    loop {
        match socket.peek_from(&mut probe) {
            Ok(_) => return Ok(true),
            Err(e) if is_timeout(&e) => {}
            Err(e) => return Err(e),
        }
        let now = std::time::Instant::now();
        if now >= deadline {
            return Ok(false);
        }
        std::thread::sleep(SLICE.min(deadline - now));
    }
}

#[derive(Debug)]
pub struct UdpTransport {
    socket: UdpSocket,
    local: String,
    buf: Vec<u8>,
}

impl UdpTransport {
    pub fn bind(addr: &str) -> Result<Self, TransportError> {
        let socket = UdpSocket::bind(resolve(addr)?)?;
        socket.set_nonblocking(true)?;
        let local = socket.local_addr()?.to_string();
        Ok(UdpTransport {
            socket,
            local,
            buf: vec![0; MAX_DATAGRAM],
        })
    }

    fn recv(&mut self, timeout: Option<Duration>) -> Result<Option<Datagram>, TransportError> {
        if let Some(d) = self.recv_now()? {
            return Ok(Some(d));
        }
        match timeout {
            Some(t) if wait_readable(&self.socket, t)? => self.recv_now(),
            _ => Ok(None),
        }
    }

    fn recv_now(&mut self) -> Result<Option<Datagram>, TransportError> {
        match self.socket.recv_from(&mut self.buf) {
            Ok((n, src)) => Ok(Some(Datagram {
                src: src.to_string(),
                bytes: self.buf[..n].to_vec(),
                wire_bytes: n as u32,
                rx_ns: system_now_ns(),
            })),
            Err(e) if is_timeout(&e) => Ok(None),
            // ICMP port-unreachable from an earlier send surfaces here on Linux.
            Err(e) if e.kind() == ErrorKind::ConnectionRefused => Ok(None),
            Err(e) => Err(e.into()),
        }
    }
}

impl Transport for UdpTransport {
    fn local_addr(&self) -> String {
        self.local.clone()
    }

    fn send_to(&mut self, dst: &str, datagram: &[u8]) -> Result<(), TransportError> {
        match self.socket.send_to(datagram, resolve(dst)?) {
            Ok(_) => Ok(()),
            Err(e) if e.kind() == ErrorKind::ConnectionRefused => Ok(()),
            Err(e) => Err(e.into()),
        }
    }

    fn try_recv(&mut self) -> Result<Option<Datagram>, TransportError> {
        self.recv(None)
    }

    fn now_ns(&self) -> u64 {
        system_now_ns()
    }
}

impl WaitTransport for UdpTransport {
    fn recv_timeout(&mut self, timeout: Duration) -> Result<Option<Datagram>, TransportError> {
        self.recv(Some(timeout))
    }
}

/// Polls a system-clock emulated network; deliveries are only visible at
/// poll time, so the wait is sliced finely.
impl WaitTransport for EmulatedEndpoint {
    fn recv_timeout(&mut self, timeout: Duration) -> Result<Option<Datagram>, TransportError> {
        const SLICE: Duration = Duration::from_micros(200);
        let deadline = std::time::Instant::now() + timeout;
        loop {
            if let Some(d) = self.try_recv()? {
                return Ok(Some(d));
            }
            let now = std::time::Instant::now();
            if now >= deadline {
                return Ok(None);
            }
            std::thread::sleep(SLICE.min(deadline - now));
        }
    }
}

/// Frame between a relay client and the relay:
/// `b'R' | wire_bytes u32 BE | addr_len u8 | addr | payload`. Toward the
/// relay `addr` is the destination, away from it the original source.
pub(crate) const RELAY_MAGIC: u8 = b'R';

pub(crate) fn encode_relay(addr: &str, wire_bytes: u32, payload: &[u8]) -> Result<Vec<u8>, TransportError> {
    let a = addr.as_bytes();
    let len = u8::try_from(a.len()).map_err(|_| TransportError::BadAddress(addr.to_string()))?;
    let mut out = Vec::with_capacity(6 + a.len() + payload.len());
    out.push(RELAY_MAGIC);
    out.extend_from_slice(&wire_bytes.to_be_bytes());
    out.push(len);
    out.extend_from_slice(a);
    out.extend_from_slice(payload);
    Ok(out)
}

/// `(addr, wire_bytes, payload)`, or None for anything malformed.
pub(crate) fn decode_relay(frame: &[u8]) -> Option<(&str, u32, &[u8])> {
    let (&magic, rest) = frame.split_first()?;
    if magic != RELAY_MAGIC || rest.len() < 5 {
        return None;
    }
    let wire = u32::from_be_bytes(rest[..4].try_into().ok()?);
    let len = rest[4] as usize;
    let rest = &rest[5..];
    if rest.len() < len {
        return None;
    }
    let addr = std::str::from_utf8(&rest[..len]).ok()?;
    Some((addr, wire, &rest[len..]))
}

/// UDP transport whose every datagram crosses a [`crate::relay::ChannelRelay`].
/// Probes travel as header plus declared size, like on the in-process
/// emulated channel.
#[derive(Debug)]
pub struct RelayTransport {
    inner: UdpTransport,
    relay: SocketAddr,
}

impl RelayTransport {
    pub fn bind(addr: &str, relay: &str) -> Result<Self, TransportError> {
        Ok(RelayTransport {
            inner: UdpTransport::bind(addr)?,
            relay: resolve(relay)?,
        })
    }

    fn unwrap(&self, d: Option<Datagram>) -> Option<Datagram> {
        let d = d?;
        if d.src != self.relay.to_string() {
            return None;
        }
        let (src, wire, payload) = decode_relay(&d.bytes)?;
        Some(Datagram {
            src: src.to_string(),
            bytes: payload.to_vec(),
            wire_bytes: wire,
            rx_ns: d.rx_ns,
        })
    }

    fn forward(&mut self, dst: &str, wire_bytes: u32, payload: &[u8]) -> Result<(), TransportError> {
        let frame = encode_relay(dst, wire_bytes, payload)?;
        self.inner.socket.send_to(&frame, self.relay)?;
        Ok(())
    }
}

impl Transport for RelayTransport {
    fn local_addr(&self) -> String {
        self.inner.local_addr()
    }

    fn send_to(&mut self, dst: &str, datagram: &[u8]) -> Result<(), TransportError> {
        self.forward(dst, datagram.len() as u32, datagram)
    }

    fn send_probe(&mut self, dst: &str, header: &[u8; HEADER_LEN], wire_bytes: u32) -> Result<(), TransportError> {
        self.forward(dst, wire_bytes, header)
    }

    fn try_recv(&mut self) -> Result<Option<Datagram>, TransportError> {
        // Foreign datagrams are skipped, not returned as empty polls.
        loop {
            match self.inner.try_recv()? {
                None => return Ok(None),
                d => {
                    if let Some(d) = self.unwrap(d) {
                        return Ok(Some(d));
                    }
                }
            }
        }
    }

    fn now_ns(&self) -> u64 {
        system_now_ns()
    }
}

impl WaitTransport for RelayTransport {
    fn recv_timeout(&mut self, timeout: Duration) -> Result<Option<Datagram>, TransportError> {
        let d = self.inner.recv_timeout(timeout)?;
        Ok(self.unwrap(d))
    }
}
