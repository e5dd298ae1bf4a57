//! Test-only oracles and fixtures, written independently of the library
//! code they check.
#![allow(dead_code)]

use std::collections::VecDeque;
use std::net::SocketAddr;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use mmdrive::numerics::Matrix;
use rand::Rng;
use tokio::io::{AsyncReadExt, AsyncWriteExt};
use tokio::net::TcpListener;

pub type V3 = [f64; 3];
pub type M3 = [[f64; 3]; 3];

// ---------------------------------------------------------------- geometry

pub fn random_cloud<R: Rng>(n: usize, half: f64, rng: &mut R) -> Vec<V3> {
    (0..n)
        .map(|_| [0, 1, 2].map(|_| rng.random_range(-half..=half)))
        .collect()
}

/// O(N) scan: ids within `r` of point `i`, nearest first, ties by id.
pub fn brute_neighbors(points: &[V3], i: usize, r: f64, k_max: usize) -> Vec<usize> {
    let c = points[i];
    let mut hits: Vec<(f64, usize)> = Vec::new();
    for (j, p) in points.iter().enumerate() {
        let dx = p[0] - c[0];
        let dy = p[1] - c[1];
        let dz = p[2] - c[2];
        let d2 = dx * dx + dy * dy + dz * dz;
        if d2 <= r * r {
            hits.push((d2, j));
        }
    }
    hits.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
    hits.truncate(k_max);
    hits.into_iter().map(|(_, j)| j).collect()
}

pub fn scalar_mean(points: &[V3], ids: &[usize]) -> V3 {
    let mut m = [0.0; 3];
    for &j in ids {
        for k in 0..3 {
            m[k] += points[j][k];
        }
    }
    m.map(|v| v / ids.len() as f64)
}

pub fn scalar_cov(points: &[V3], ids: &[usize]) -> M3 {
    let mu = scalar_mean(points, ids);
    let mut c = [[0.0; 3]; 3];
    for &j in ids {
        for a in 0..3 {
            for b in 0..3 {
                c[a][b] += (points[j][a] - mu[a]) * (points[j][b] - mu[b]);
            }
        }
    }
    c.map(|row| row.map(|v| v / ids.len() as f64))
}

/// Cyclic Jacobi. Returns ascending eigenvalues with matching unit vectors.
pub fn jacobi(c: &M3) -> ([f64; 3], [V3; 3]) {
    let mut a = *c;
    let mut v = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
    for _ in 0..100 {
        let off = a[0][1].powi(2) + a[0][2].powi(2) + a[1][2].powi(2);
        if off < 1e-30 {
            break;
        }
        for (p, q) in [(0, 1), (0, 2), (1, 2)] {
            if a[p][q].abs() < 1e-300 {
                continue;
            }
            let theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
            let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
            let t = if theta == 0.0 { 1.0 } else { t };
            let cs = 1.0 / (t * t + 1.0).sqrt();
            let sn = t * cs;
            for k in 0..3 {
                let (akp, akq) = (a[k][p], a[k][q]);
                a[k][p] = cs * akp - sn * akq;
                a[k][q] = sn * akp + cs * akq;
            }
            for k in 0..3 {
                let (apk, aqk) = (a[p][k], a[q][k]);
                a[p][k] = cs * apk - sn * aqk;
                a[q][k] = sn * apk + cs * aqk;
            }
            for row in v.iter_mut() {
                let (vp, vq) = (row[p], row[q]);
                row[p] = cs * vp - sn * vq;
                row[q] = sn * vp + cs * vq;
            }
        }
    }
    let mut idx = [0, 1, 2];
    idx.sort_by(|&i, &j| a[i][i].partial_cmp(&a[j][j]).unwrap());
    let vals = idx.map(|i| a[i][i]);
    let vecs = idx.map(|i| [v[0][i], v[1][i], v[2][i]]);
    (vals, vecs)
}

/// Smallest root of `det(λI - C)` by Newton's method from the left, where
/// the monic cubic is increasing and concave.
pub fn char_poly_min_root(c: &M3) -> f64 {
    let tr = c[0][0] + c[1][1] + c[2][2];
    let minors = c[0][0] * c[1][1] - c[0][1] * c[1][0] + c[0][0] * c[2][2] - c[0][2] * c[2][0]
        + c[1][1] * c[2][2] - c[1][2] * c[2][1];
    let det = c[0][0] * (c[1][1] * c[2][2] - c[1][2] * c[2][1]) - c[0][1] * (c[1][0] * c[2][2] - c[1][2] * c[2][0])
        + c[0][2] * (c[1][0] * c[2][1] - c[1][1] * c[2][0]);
    let p = |l: f64| ((l - tr) * l + minors) * l - det;
    let dp = |l: f64| (3.0 * l - 2.0 * tr) * l + minors;
    let bound = c.iter().flatten().map(|v| v.abs()).sum::<f64>() + 1.0;
    let mut l = -bound;
    for _ in 0..200 {
        let step = p(l) / dp(l);
        if !step.is_finite() || step.abs() <= 1e-16 * bound {
            break;
        }
        l -= step;
    }
    l
}

/// Largest-magnitude component positive, first wins ties.
pub fn canonical(v: V3) -> V3 {
    let mut best = 0;
    for k in 1..3 {
        if v[k].abs() > v[best].abs() {
            best = k;
        }
    }
    if v[best] < 0.0 {
        v.map(|x| -x)
    } else {
        v
    }
}

pub fn angle(a: V3, b: V3) -> f64 {
    let dot = a[0] * b[0] + a[1] * b[1] + a[2] * b[2];
    let na = (a[0] * a[0] + a[1] * a[1] + a[2] * a[2]).sqrt();
    let nb = (b[0] * b[0] + b[1] * b[1] + b[2] * b[2]).sqrt();
    let cos = (dot / (na * nb)).clamp(-1.0, 1.0);
    // acos loses precision near 0; the cross product does not
    let cross = [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]];
    let sin = (cross[0] * cross[0] + cross[1] * cross[1] + cross[2] * cross[2]).sqrt() / (na * nb);
    sin.atan2(cos)
}

/// Normals through the brute-force neighbor scan and [`jacobi`].
pub fn oracle_normals(points: &[V3], r: f64, k_max: usize) -> Vec<Option<V3>> {
    (0..points.len())
        .map(|i| {
            let ids = brute_neighbors(points, i, r, k_max);
            if ids.len() < 3 {
                return None;
            }
            let (vals, vecs) = jacobi(&scalar_cov(points, &ids));
            if vals[1] < 1e-12 {
                return None;
            }
            Some(canonical(vecs[0]))
        })
        .collect()
}

pub fn rotation(axis: V3, theta: f64) -> M3 {
    let n = (axis[0] * axis[0] + axis[1] * axis[1] + axis[2] * axis[2]).sqrt();
    let [x, y, z] = axis.map(|v| v / n);
    let (s, c) = theta.sin_cos();
    let t = 1.0 - c;
    [
        [t * x * x + c, t * x * y - s * z, t * x * z + s * y],
        [t * x * y + s * z, t * y * y + c, t * y * z - s * x],
        [t * x * z - s * y, t * y * z + s * x, t * z * z + c],
    ]
}

pub fn apply(r: &M3, v: V3) -> V3 {
    [0, 1, 2].map(|i| r[i][0] * v[0] + r[i][1] * v[1] + r[i][2] * v[2])
}

// ---------------------------------------------------------------- attention

pub fn rows(m: &Matrix) -> Vec<Vec<f64>> {
    (0..m.rows()).map(|i| m.row(i).to_vec()).collect()
}

pub fn from_rows(v: &[Vec<f64>]) -> Matrix {
    Matrix::from_rows(v)
}

pub fn scalar_softmax(x: &[f64]) -> Vec<f64> {
    let m = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = x.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// `softmax(q kᵀ / sqrt(d)) v` one scalar at a time.
pub fn scalar_attend(q: &[Vec<f64>], k: &[Vec<f64>], v: &[Vec<f64>], d: usize) -> Vec<Vec<f64>> {
    q.iter()
        .map(|qi| {
            let scores: Vec<f64> = k
                .iter()
                .map(|kj| qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() / (d as f64).sqrt())
                .collect();
            let w = scalar_softmax(&scores);
            (0..v[0].len())
                .map(|c| w.iter().zip(v).map(|(wj, vj)| wj * vj[c]).sum())
                .collect()
        })
        .collect()
}

/// `x Wᵀ (+ b)` with `W` stored out x in.
pub fn scalar_linear(x: &[Vec<f64>], w: &[Vec<f64>], b: Option<&[f64]>) -> Vec<Vec<f64>> {
    x.iter()
        .map(|xi| {
            w.iter()
                .enumerate()
                .map(|(o, wo)| xi.iter().zip(wo).map(|(a, c)| a * c).sum::<f64>() + b.map_or(0.0, |b| b[o]))
                .collect()
        })
        .collect()
}

pub fn scalar_layer_norm(x: &[Vec<f64>], eps: f64) -> Vec<Vec<f64>> {
    x.iter()
        .map(|r| {
            let n = r.len() as f64;
            let mean = r.iter().sum::<f64>() / n;
            let var = r.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            let denom = (var + eps).sqrt();
            r.iter()
                .map(|v| if denom == 0.0 { 0.0 } else { (v - mean) / denom })
                .collect()
        })
        .collect()
}

pub fn max_abs_diff(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .flat_map(|(x, y)| {
            assert_eq!(x.len(), y.len());
            x.iter().zip(y).map(|(p, q)| (p - q).abs())
        })
        .fold(0.0, f64::max)
}

// ---------------------------------------------------------------- http stub

#[derive(Debug, Clone)]
pub enum Reply {
    Status(u16, String),
    /// Accept the request and never answer.
    Hang,
}

pub fn ok_body(content: &str) -> String {
    serde_json::json!({"choices": [{"message": {"role": "assistant", "content": content}}]}).to_string()
}

/// Minimal HTTP/1.1 server that answers scripted replies in order, then
/// repeats the last one. Records request bodies.
pub struct Stub {
    pub addr: SocketAddr,
    pub hits: Arc<AtomicUsize>,
    pub bodies: Arc<Mutex<Vec<String>>>,
}

impl Stub {
    pub fn url(&self) -> String {
        format!("http://{}/v1", self.addr)
    }
}

pub async fn spawn_stub(script: Vec<Reply>) -> Stub {
    let listener = TcpListener::bind("127.0.0.1:0").await.unwrap();
    let addr = listener.local_addr().unwrap();
    let hits = Arc::new(AtomicUsize::new(0));
    let bodies = Arc::new(Mutex::new(Vec::new()));
    let script = Arc::new(Mutex::new(VecDeque::from(script)));
    let (h, b) = (hits.clone(), bodies.clone());
    tokio::spawn(async move {
        loop {
            let Ok((mut sock, _)) = listener.accept().await else { return };
            let (h, b, script) = (h.clone(), b.clone(), script.clone());
            tokio::spawn(async move {
                let Some(body) = read_request(&mut sock).await else { return };
                h.fetch_add(1, Ordering::SeqCst);
                b.lock().unwrap().push(body);
                let reply = {
                    let mut s = script.lock().unwrap();
                    if s.len() > 1 {
                        s.pop_front().unwrap()
                    } else {
                        s.front().cloned().unwrap_or(Reply::Status(500, "empty script".into()))
                    }
                };
                match reply {
                    Reply::Hang => tokio::time::sleep(Duration::from_secs(3600)).await,
                    Reply::Status(code, body) => {
                        let resp = format!(
                            "HTTP/1.1 {code} X\r\ncontent-type: application/json\r\ncontent-length: {}\r\nconnection: close\r\n\r\n{body}",
                            body.len()
                        );
                        let _ = sock.write_all(resp.as_bytes()).await;
                        let _ = sock.shutdown().await;
                    }
                }
            });
        }
    });
    Stub { addr, hits, bodies }
}

async fn read_request(sock: &mut tokio::net::TcpStream) -> Option<String> {
    let mut buf = Vec::new();
    let mut chunk = [0u8; 4096];
    let header_end = loop {
        let n = sock.read(&mut chunk).await.ok()?;
        if n == 0 {
            return None;
        }
        buf.extend_from_slice(&chunk[..n]);
        if let Some(p) = buf.windows(4).position(|w| w == b"\r\n\r\n") {
            break p + 4;
        }
    };
    let head = String::from_utf8_lossy(&buf[..header_end]).to_ascii_lowercase();
    let len: usize = head
        .lines()
        .find_map(|l| l.strip_prefix("content-length:").map(|v| v.trim().parse().unwrap_or(0)))
        .unwrap_or(0);
    while buf.len() < header_end + len {
        let n = sock.read(&mut chunk).await.ok()?;
        if n == 0 {
            break;
        }
        buf.extend_from_slice(&chunk[..n]);
    }
    Some(String::from_utf8_lossy(&buf[header_end..]).into_owned())
}
