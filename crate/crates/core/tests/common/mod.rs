//! Independent reference implementations and test plumbing shared by the
//! integration tests. Nothing here calls into the optimized code paths it is
//! used to check.

#![allow(dead_code)]

use std::io::{BufRead, BufReader, Read, Write};
use std::net::{TcpListener, TcpStream};
use std::path::PathBuf;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use docground::regressor::RegressorParams;

/// Full-matrix Levenshtein over Unicode scalars.
pub fn naive_levenshtein(a: &str, b: &str) -> usize {
    let a: Vec<char> = a.chars().collect();
    let b: Vec<char> = b.chars().collect();
    let mut d = vec![vec![0usize; b.len() + 1]; a.len() + 1];
    for (i, row) in d.iter_mut().enumerate() {
        row[0] = i;
    }
    for (j, cell) in d[0].iter_mut().enumerate() {
        *cell = j;
    }
    for i in 1..=a.len() {
        for j in 1..=b.len() {
            let sub = d[i - 1][j - 1] + usize::from(a[i - 1] != b[j - 1]);
            d[i][j] = sub.min(d[i - 1][j] + 1).min(d[i][j - 1] + 1);
        }
    }
    d[a.len()][b.len()]
}

/// Straight-line ANLS, written from the definition.
pub fn naive_anls(pairs: &[(Option<String>, String)], tau: f64) -> f64 {
    if pairs.is_empty() {
        return 0.0;
    }
    let norm = |s: &str| s.split_whitespace().collect::<Vec<_>>().join(" ").to_lowercase();
    let mut total = 0.0;
    for (p, g) in pairs {
        let Some(p) = p else { continue };
        let (p, g) = (norm(p), norm(g));
        let len = p.chars().count().max(g.chars().count());
        let s = if len == 0 {
            1.0
        } else {
            1.0 - naive_levenshtein(&p, &g) as f64 / len as f64
        };
        if s >= tau {
            total += s;
        }
    }
    total / pairs.len() as f64
}

fn dense(w: &[f64], b: &[f64], n_out: usize, x: &[f64]) -> Vec<f64> {
    (0..n_out)
        .map(|j| b[j] + x.iter().enumerate().map(|(i, xi)| xi * w[i * n_out + j]).sum::<f64>())
        .collect()
}

fn relu(v: Vec<f64>) -> Vec<f64> {
    v.into_iter().map(|x| x.max(0.0)).collect()
}

/// Reference forward pass returning the ordered corners.
pub fn naive_forward(p: &RegressorParams, visual: &[f32], text: &[f32]) -> [f64; 4] {
    let xv: Vec<f64> = visual.iter().map(|&v| v as f64).collect();
    let xt: Vec<f64> = text.iter().map(|&v| v as f64).collect();
    let zv = relu(dense(&p.visual.w, &p.visual.b, p.visual.n_out, &xv));
    let zt = relu(dense(&p.text.w, &p.text.b, p.text.n_out, &xt));
    let fused: Vec<f64> = zv.into_iter().chain(zt).collect();
    let h1 = relu(dense(&p.fuse1.w, &p.fuse1.b, p.fuse1.n_out, &fused));
    let h2 = relu(dense(&p.fuse2.w, &p.fuse2.b, p.fuse2.n_out, &h1));
    let o: Vec<f64> = dense(&p.head.w, &p.head.b, 4, &h2)
        .into_iter()
        .map(|x| 1.0 / (1.0 + (-x).exp()))
        .collect();
    [o[0].min(o[2]), o[1].min(o[3]), o[0].max(o[2]), o[1].max(o[3])]
}

/// Mean Huber (delta 1) over four coordinates.
pub fn naive_loss(pred: &[f64; 4], target: &[f64; 4]) -> f64 {
    pred.iter()
        .zip(target)
        .map(|(p, t)| {
            let d = (p - t).abs();
            if d < 1.0 {
                0.5 * d * d
            } else {
                d - 0.5
            }
        })
        .sum::<f64>()
        / 4.0
}

pub fn repo_root() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../..")
}

pub fn golden_dir() -> PathBuf {
    repo_root().join("fixtures/golden")
}

/// One canned HTTP reply.
#[derive(Clone)]
pub struct Reply {
    pub status: u16,
    pub body: String,
    pub delay: Duration,
}

impl Reply {
    pub fn ok(body: impl Into<String>) -> Self {
        Self {
            status: 200,
            body: body.into(),
            delay: Duration::ZERO,
        }
    }

    pub fn status(status: u16) -> Self {
        Self {
            status,
            body: "{\"error\":\"stub\"}".into(),
            delay: Duration::ZERO,
        }
    }

    pub fn delayed(mut self, d: Duration) -> Self {
        self.delay = d;
        self
    }
}

/// A tiny threaded HTTP/1.1 server that plays back `script` in order (the
/// last reply repeats) and tracks request counts and peak concurrency.
pub struct StubServer {
    pub url: String,
    pub requests: Arc<AtomicUsize>,
    pub peak: Arc<AtomicUsize>,
    pub bodies: Arc<Mutex<Vec<String>>>,
}

impl StubServer {
    pub fn start(script: Vec<Reply>) -> Self {
        let listener = TcpListener::bind("127.0.0.1:0").expect("bind stub");
        let url = format!("http://{}/v1", listener.local_addr().unwrap());
        let requests = Arc::new(AtomicUsize::new(0));
        let peak = Arc::new(AtomicUsize::new(0));
        let active = Arc::new(AtomicUsize::new(0));
        let bodies = Arc::new(Mutex::new(Vec::new()));
        let script = Arc::new(script);
        {
            let (requests, peak, bodies) = (requests.clone(), peak.clone(), bodies.clone());
            std::thread::spawn(move || {
                for stream in listener.incoming() {
                    let Ok(stream) = stream else { continue };
                    let (requests, peak, active, bodies, script) =
                        (requests.clone(), peak.clone(), active.clone(), bodies.clone(), script.clone());
                    std::thread::spawn(move || {
                        let now = active.fetch_add(1, Ordering::SeqCst) + 1;
                        peak.fetch_max(now, Ordering::SeqCst);
                        let n = requests.fetch_add(1, Ordering::SeqCst);
                        let reply = script[n.min(script.len() - 1)].clone();
                        let _ = serve(stream, &reply, &bodies);
                        active.fetch_sub(1, Ordering::SeqCst);
                    });
                }
            });
        }
        Self {
            url,
            requests,
            peak,
            bodies,
        }
    }

    pub fn request_count(&self) -> usize {
        self.requests.load(Ordering::SeqCst)
    }

    pub fn peak_concurrency(&self) -> usize {
        self.peak.load(Ordering::SeqCst)
    }
}

fn serve(stream: TcpStream, reply: &Reply, bodies: &Mutex<Vec<String>>) -> std::io::Result<()> {
    let mut reader = BufReader::new(stream.try_clone()?);
    let mut len = 0usize;
    loop {
        let mut line = String::new();
        if reader.read_line(&mut line)? == 0 {
            break;
        }
        let l = line.trim_end();
        if l.is_empty() {
            break;
        }
        if let Some((k, v)) = l.split_once(':') {
            if k.eq_ignore_ascii_case("content-length") {
                len = v.trim().parse().unwrap_or(0);
            }
        }
    }
    let mut body = vec![0u8; len];
    reader.read_exact(&mut body)?;
    bodies.lock().unwrap().push(String::from_utf8_lossy(&body).into_owned());
    std::thread::sleep(reply.delay);
    let mut out = stream;
    write!(
        out,
        "HTTP/1.1 {} Stub\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{}",
        reply.status,
        reply.body.len(),
        reply.body
    )?;
    out.flush()
}

/// OpenAI-style chat completion body carrying `text`.
pub fn chat_body(text: &str) -> String {
    serde_json::json!({"choices": [{"message": {"role": "assistant", "content": text}}]}).to_string()
}
