//! Frame transports. In-process lanes pass encoded frames over channels;
//! multi-process mode sends the same frames over TCP.

use std::io::{self, BufReader, BufWriter};
use std::net::{TcpListener, TcpStream, ToSocketAddrs};
use std::sync::mpsc::{self, Receiver, Sender};
use std::thread;
use std::time::{Duration, Instant};

use super::protocol::{decode, encode, read_frame, write_frame, ProtocolMessage};

pub trait FrameSink: Send {
    fn send_frame(&mut self, frame: &[u8]) -> io::Result<()>;
}

pub trait FrameSource: Send {
    fn recv_frame(&mut self) -> io::Result<Vec<u8>>;
}

impl FrameSink for Sender<Vec<u8>> {
    fn send_frame(&mut self, frame: &[u8]) -> io::Result<()> {
        self.send(frame.to_vec())
            .map_err(|_| io::Error::new(io::ErrorKind::BrokenPipe, "peer channel closed"))
    }
}

impl FrameSource for Receiver<Vec<u8>> {
    fn recv_frame(&mut self) -> io::Result<Vec<u8>> {
        let frame = self
            .recv()
            .map_err(|_| io::Error::new(io::ErrorKind::UnexpectedEof, "peer channel closed"))?;
        // Strip the length prefix so both transports yield frame bodies.
        Ok(frame[4..].to_vec())
    }
}

pub struct TcpSink(BufWriter<TcpStream>);

impl FrameSink for TcpSink {
    fn send_frame(&mut self, frame: &[u8]) -> io::Result<()> {
        write_frame(&mut self.0, frame)
    }
}

pub struct TcpSource(BufReader<TcpStream>);

impl FrameSource for TcpSource {
    fn recv_frame(&mut self) -> io::Result<Vec<u8>> {
        read_frame(&mut self.0)
    }
}

pub fn tcp_pair(stream: TcpStream) -> io::Result<(TcpSink, TcpSource)> {
    stream.set_nodelay(true)?;
    let read = stream.try_clone()?;
    Ok((TcpSink(BufWriter::new(stream)), TcpSource(BufReader::new(read))))
}

/// Messages from worker `worker` as seen by the coordinator. `Err` carries
/// the reason the link failed.
pub struct Inbound {
    pub worker: usize,
    pub message: Result<ProtocolMessage, String>,
    pub frame_bytes: usize,
}

/// Spawns a thread that decodes frames from `source` into `inbox` until the
/// link fails, reporting the failure once.
pub fn spawn_reader(worker: usize, mut source: Box<dyn FrameSource>, inbox: Sender<Inbound>) {
    thread::Builder::new()
        .name(format!("esotn-reader-{worker}"))
        .spawn(move || loop {
            let (message, frame_bytes) = match source.recv_frame() {
                Ok(body) => {
                    let len = body.len() + 4;
                    (decode(&body).map_err(|e| e.to_string()), len)
                }
                Err(e) => (Err(e.to_string()), 0),
            };
            let failed = message.is_err();
            if inbox.send(Inbound { worker, message, frame_bytes }).is_err() || failed {
                return;
            }
        })
        .expect("spawning reader thread");
}

/// The worker end of a link.
pub struct WorkerLink {
    pub sink: Box<dyn FrameSink>,
    pub source: Box<dyn FrameSource>,
}

impl WorkerLink {
    pub fn send(&mut self, msg: &ProtocolMessage) -> io::Result<()> {
        self.sink.send_frame(&encode(msg))
    }

    pub fn recv(&mut self) -> io::Result<ProtocolMessage> {
        decode(&self.source.recv_frame()?)
    }
}

/// In-process link pair: the coordinator half (sink + source) and the worker half.
pub fn channel_link() -> ((Box<dyn FrameSink>, Box<dyn FrameSource>), WorkerLink) {
    let (to_worker, worker_rx) = mpsc::channel::<Vec<u8>>();
    let (to_coord, coord_rx) = mpsc::channel::<Vec<u8>>();
    (
        (Box::new(to_worker), Box::new(coord_rx)),
        WorkerLink { sink: Box::new(to_coord), source: Box::new(worker_rx) },
    )
}

/// Accepts `count` worker connections, in arrival order.
pub fn accept_workers(
    listener: &TcpListener,
    count: usize,
    timeout: Duration,
) -> io::Result<Vec<(TcpSink, TcpSource)>> {
    listener.set_nonblocking(true)?;
    let deadline = Instant::now() + timeout;
    let mut out = Vec::with_capacity(count);
    while out.len() < count {
        match listener.accept() {
            Ok((stream, _)) => {
                stream.set_nonblocking(false)?;
                out.push(tcp_pair(stream)?);
            }
            Err(e) if e.kind() == io::ErrorKind::WouldBlock => {
                if Instant::now() >= deadline {
                    return Err(io::Error::new(
                        io::ErrorKind::TimedOut,
                        format!("only {} of {count} workers connected within {timeout:?}", out.len()),
                    ));
                }
                thread::sleep(Duration::from_millis(10));
            }
            Err(e) => return Err(e),
        }
    }
    Ok(out)
}

/// Connects to the coordinator, retrying until `timeout` elapses.
pub fn connect(endpoint: &str, timeout: Duration) -> io::Result<WorkerLink> {
    let deadline = Instant::now() + timeout;
    loop {
        let attempt = endpoint
            .to_socket_addrs()
            .and_then(|mut addrs| addrs.next().ok_or_else(|| io::Error::other("endpoint resolved to nothing")))
            .and_then(TcpStream::connect);
        match attempt {
            Ok(stream) => {
                let (sink, source) = tcp_pair(stream)?;
                return Ok(WorkerLink { sink: Box::new(sink), source: Box::new(source) });
            }
            Err(e) if Instant::now() >= deadline => return Err(e),
            Err(_) => thread::sleep(Duration::from_millis(50)),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn channel_link_carries_messages_both_ways() {
        let ((mut sink, source), mut worker) = channel_link();
        let (tx, rx) = mpsc::channel();
        spawn_reader(3, source, tx);
        sink.send_frame(&encode(&ProtocolMessage::Shutdown)).unwrap();
        assert_eq!(worker.recv().unwrap(), ProtocolMessage::Shutdown);
        worker.send(&ProtocolMessage::UpdateBroadcast { t: 1, delta: vec![2.0] }).unwrap();
        let got = rx.recv().unwrap();
        assert_eq!(got.worker, 3);
        assert_eq!(got.message, Ok(ProtocolMessage::UpdateBroadcast { t: 1, delta: vec![2.0] }));
        assert_eq!(got.frame_bytes, 4 + 1 + 24);
        drop(worker);
        assert!(rx.recv().unwrap().message.is_err());
    }

    #[test]
    fn tcp_round_trip() {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap().to_string();
        let client = thread::spawn(move || {
            let mut link = connect(&addr, Duration::from_secs(5)).unwrap();
            let msg = link.recv().unwrap();
            link.send(&msg).unwrap();
        });
        let mut conns = accept_workers(&listener, 1, Duration::from_secs(5)).unwrap();
        let (mut sink, mut source) = conns.pop().unwrap();
        let msg = ProtocolMessage::ReturnsReport { t: 4, worker: 1, eval_seconds: 0.5, returns: vec![(2, 1.25)] };
        sink.send_frame(&encode(&msg)).unwrap();
        assert_eq!(decode(&source.recv_frame().unwrap()).unwrap(), msg);
        client.join().unwrap();
    }

    #[test]
    fn accept_times_out() {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let err = accept_workers(&listener, 1, Duration::from_millis(50)).err().unwrap();
        assert_eq!(err.kind(), io::ErrorKind::TimedOut);
    }
}
