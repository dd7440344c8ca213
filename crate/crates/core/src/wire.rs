//! Length-prefixed message frames and the transports that carry them.
//!
//! A frame is `u32 length | u8 kind | body`, where `length` counts the kind
//! byte and the body. Variable-length body fields carry their own `u32`
//! length. Every transport speaks the same framing, so a transcript recorded
//! over the loopback is byte-for-byte what a socket would carry.

use std::io::{Read, Write};
use std::net::{TcpListener, TcpStream};

use crate::crypto::{Tag, TAG_LEN};
use crate::error::{Error, Result};
use crate::store::{AccessKind, OpMetrics, Range};

pub const KIND_ERROR: u8 = 0xEE;
pub const KIND_METRICS_REQ: u8 = 0xFD;
pub const KIND_METRICS_RESP: u8 = 0xFC;

const MAX_FRAME: usize = 1 << 30;

pub struct Encoder {
    buf: Vec<u8>,
}

impl Encoder {
    pub fn new(kind: u8) -> Self {
        let mut buf = vec![0; 4];
        buf.push(kind);
        Encoder { buf }
    }

    pub fn u8(&mut self, v: u8) -> &mut Self {
        self.buf.push(v);
        self
    }

    pub fn u32(&mut self, v: u32) -> &mut Self {
        self.buf.extend_from_slice(&v.to_le_bytes());
        self
    }

    pub fn u64(&mut self, v: u64) -> &mut Self {
        self.buf.extend_from_slice(&v.to_le_bytes());
        self
    }

    pub fn tag(&mut self, t: &Tag) -> &mut Self {
        self.buf.extend_from_slice(&t.0);
        self
    }

    pub fn bytes(&mut self, b: &[u8]) -> &mut Self {
        self.u32(b.len() as u32);
        self.buf.extend_from_slice(b);
        self
    }

    pub fn words(&mut self, w: &[u64]) -> &mut Self {
        self.u32(w.len() as u32);
        for x in w {
            self.buf.extend_from_slice(&x.to_le_bytes());
        }
        self
    }

    pub fn finish(mut self) -> Vec<u8> {
        let len = (self.buf.len() - 4) as u32;
        self.buf[..4].copy_from_slice(&len.to_le_bytes());
        self.buf
    }
}

pub struct Decoder<'a> {
    kind: u8,
    rest: &'a [u8],
}

fn short() -> Error {
    Error::Protocol("truncated frame".into())
}

impl<'a> Decoder<'a> {
    pub fn new(frame: &'a [u8]) -> Result<Self> {
        if frame.len() < 5 {
            return Err(short());
        }
        let len = u32::from_le_bytes(frame[..4].try_into().unwrap()) as usize;
        if len + 4 != frame.len() {
            return Err(Error::Protocol(format!("frame length {len} does not match {} bytes", frame.len() - 4)));
        }
        Ok(Decoder {
            kind: frame[4],
            rest: &frame[5..],
        })
    }

    pub fn kind(&self) -> u8 {
        self.kind
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.rest.len() < n {
            return Err(short());
        }
        let (head, tail) = self.rest.split_at(n);
        self.rest = tail;
        Ok(head)
    }

    pub fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub fn tag(&mut self) -> Result<Tag> {
        Ok(Tag(self.take(TAG_LEN)?.try_into().unwrap()))
    }

    pub fn bytes(&mut self) -> Result<Vec<u8>> {
        let n = self.u32()? as usize;
        Ok(self.take(n)?.to_vec())
    }

    pub fn words(&mut self) -> Result<Vec<u64>> {
        let n = self.u32()? as usize;
        let raw = self.take(n.checked_mul(8).ok_or_else(short)?)?;
        Ok(raw.chunks_exact(8).map(|c| u64::from_le_bytes(c.try_into().unwrap())).collect())
    }

    pub fn finish(self) -> Result<()> {
        if self.rest.is_empty() {
            Ok(())
        } else {
            Err(Error::Protocol(format!("{} trailing bytes", self.rest.len())))
        }
    }
}

pub trait Wire: Sized {
    fn encode(&self) -> Vec<u8>;
    fn decode(frame: &[u8]) -> Result<Self>;
}

pub fn error_frame(msg: &str) -> Vec<u8> {
    let mut e = Encoder::new(KIND_ERROR);
    e.bytes(msg.as_bytes());
    e.finish()
}

fn check_error(frame: &[u8]) -> Result<()> {
    let mut d = Decoder::new(frame)?;
    if d.kind() == KIND_ERROR {
        let msg = String::from_utf8_lossy(&d.bytes()?).into_owned();
        return Err(Error::Remote(msg));
    }
    Ok(())
}

pub fn encode_metrics(ms: &[(usize, OpMetrics)]) -> Vec<u8> {
    let mut e = Encoder::new(KIND_METRICS_RESP);
    e.u32(ms.len() as u32);
    for (page_size, m) in ms {
        e.u64(m.op_id).u64(*page_size as u64).bytes(m.label.as_bytes());
        e.u32(m.ranges.len() as u32);
        for r in &m.ranges {
            e.u8(matches!(r.kind, AccessKind::Write) as u8).u64(r.start as u64).u64(r.len as u64);
        }
    }
    e.finish()
}

pub fn decode_metrics(frame: &[u8]) -> Result<Vec<OpMetrics>> {
    check_error(frame)?;
    let mut d = Decoder::new(frame)?;
    if d.kind() != KIND_METRICS_RESP {
        return Err(Error::Protocol("expected metrics frame".into()));
    }
    let n = d.u32()?;
    let mut out = Vec::with_capacity(n as usize);
    for _ in 0..n {
        let op_id = d.u64()?;
        let page_size = d.u64()? as usize;
        let label = String::from_utf8_lossy(&d.bytes()?).into_owned();
        let k = d.u32()?;
        let mut ranges = Vec::with_capacity(k as usize);
        for _ in 0..k {
            let kind = if d.u8()? == 1 { AccessKind::Write } else { AccessKind::Read };
            ranges.push(Range {
                kind,
                start: d.u64()? as usize,
                len: d.u64()? as usize,
            });
        }
        out.push(OpMetrics::from_ranges(op_id, &label, page_size.max(1), ranges));
    }
    d.finish()?;
    Ok(out)
}

/// Server side of a protocol: typed request in, typed response out.
pub trait Service {
    type Req: Wire;
    type Resp: Wire;

    fn handle(&mut self, req: Self::Req) -> Result<Self::Resp>;

    /// Metrics of operations handled since the last call, with the page size
    /// they were measured against.
    fn take_metrics(&mut self) -> Vec<(usize, OpMetrics)>;
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Direction {
    ToServer,
    ToClient,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Message {
    pub direction: Direction,
    pub kind: u8,
    pub bytes: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Transcript {
    pub messages: Vec<Message>,
}

impl Transcript {
    fn record(&mut self, direction: Direction, frame: &[u8]) {
        self.messages.push(Message {
            direction,
            kind: frame.get(4).copied().unwrap_or(0),
            bytes: frame.len(),
        });
    }

    pub fn clear(&mut self) {
        self.messages.clear();
    }

    pub fn lengths(&self) -> Vec<(Direction, usize)> {
        self.messages.iter().map(|m| (m.direction, m.bytes)).collect()
    }
}

pub trait Transport<Req: Wire, Resp: Wire> {
    fn call(&mut self, req: &Req) -> Result<Resp>;
    fn take_metrics(&mut self) -> Result<Vec<OpMetrics>>;
    fn transcript(&self) -> &Transcript;
    fn transcript_mut(&mut self) -> &mut Transcript;
}

/// In-process transport that still encodes and decodes every frame.
pub struct Loopback<S> {
    service: S,
    transcript: Transcript,
}

impl<S: Service> Loopback<S> {
    pub fn new(service: S) -> Self {
        Loopback {
            service,
            transcript: Transcript::default(),
        }
    }

    pub fn service(&self) -> &S {
        &self.service
    }

    pub fn service_mut(&mut self) -> &mut S {
        &mut self.service
    }
}

impl<S: Service> Transport<S::Req, S::Resp> for Loopback<S> {
    fn call(&mut self, req: &S::Req) -> Result<S::Resp> {
        let up = req.encode();
        self.transcript.record(Direction::ToServer, &up);
        let down = match self.service.handle(S::Req::decode(&up)?) {
            Ok(resp) => resp.encode(),
            Err(e) => error_frame(&e.to_string()),
        };
        self.transcript.record(Direction::ToClient, &down);
        check_error(&down)?;
        S::Resp::decode(&down)
    }

    fn take_metrics(&mut self) -> Result<Vec<OpMetrics>> {
        Ok(self.service.take_metrics().into_iter().map(|(_, m)| m).collect())
    }

    fn transcript(&self) -> &Transcript {
        &self.transcript
    }

    fn transcript_mut(&mut self) -> &mut Transcript {
        &mut self.transcript
    }
}

fn read_frame<R: Read>(r: &mut R) -> std::io::Result<Option<Vec<u8>>> {
    let mut len = [0u8; 4];
    match r.read_exact(&mut len) {
        Ok(()) => {}
        Err(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => return Ok(None),
        Err(e) => return Err(e),
    }
    let n = u32::from_le_bytes(len) as usize;
    if n == 0 || n > MAX_FRAME {
        return Err(std::io::Error::new(std::io::ErrorKind::InvalidData, "bad frame length"));
    }
    let mut frame = Vec::with_capacity(4 + n);
    frame.extend_from_slice(&len);
    frame.resize(4 + n, 0);
    r.read_exact(&mut frame[4..])?;
    Ok(Some(frame))
}

/// Client end of a TCP connection.
pub struct TcpTransport {
    stream: TcpStream,
    transcript: Transcript,
}

impl TcpTransport {
    pub fn connect(addr: &str) -> Result<Self> {
        let stream = TcpStream::connect(addr)?;
        stream.set_nodelay(true)?;
        Ok(TcpTransport {
            stream,
            transcript: Transcript::default(),
        })
    }

    fn exchange(&mut self, up: &[u8]) -> Result<Vec<u8>> {
        self.stream.write_all(up)?;
        read_frame(&mut self.stream)?.ok_or_else(|| Error::Protocol("connection closed".into()))
    }
}

impl<Req: Wire, Resp: Wire> Transport<Req, Resp> for TcpTransport {
    fn call(&mut self, req: &Req) -> Result<Resp> {
        let up = req.encode();
        self.transcript.record(Direction::ToServer, &up);
        let down = self.exchange(&up)?;
        self.transcript.record(Direction::ToClient, &down);
        check_error(&down)?;
        Resp::decode(&down)
    }

    fn take_metrics(&mut self) -> Result<Vec<OpMetrics>> {
        let down = self.exchange(&Encoder::new(KIND_METRICS_REQ).finish())?;
        decode_metrics(&down)
    }

    fn transcript(&self) -> &Transcript {
        &self.transcript
    }

    fn transcript_mut(&mut self) -> &mut Transcript {
        &mut self.transcript
    }
}

/// Serves one connection at a time until the listener fails.
pub fn serve<S: Service>(listener: TcpListener, service: &mut S) -> Result<()> {
    for stream in listener.incoming() {
        serve_connection(stream?, service)?;
    }
    Ok(())
}

pub fn serve_connection<S: Service>(mut stream: TcpStream, service: &mut S) -> Result<()> {
    stream.set_nodelay(true)?;
    while let Some(frame) = read_frame(&mut stream)? {
        let down = if frame.get(4) == Some(&KIND_METRICS_REQ) {
            encode_metrics(&service.take_metrics())
        } else {
            match S::Req::decode(&frame).and_then(|req| service.handle(req)) {
                Ok(resp) => resp.encode(),
                Err(e) => error_frame(&e.to_string()),
            }
        };
        stream.write_all(&down)?;
    }
    Ok(())
}
