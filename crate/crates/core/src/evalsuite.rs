//! Evaluation: consecutive-frame MSE, isomap embeddings of latent
//! sequences, and PNG/CSV export.

use std::cmp::Ordering;
use std::collections::BinaryHeap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use nalgebra::{DMatrix, SymmetricEigen};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::ballsim::{generate_clip, ClipSpec, Frame, VideoClip};
use crate::error::{Error, IoContext, Result};
use crate::framegan::{tensor_to_frames, FrameGenerator};
use crate::nn::params::normal;
use crate::seed::{self, stream};
use crate::videogan::{LatentSequence, VideoSampler};

/// Mean over adjacent pairs of the per-pixel mean squared difference.
///
/// Pair terms are summed in sorted order, so reversing the clip gives a
/// bit-identical result.
pub fn consecutive_mse(clip: &VideoClip) -> Result<f64> {
    if clip.len() < 2 {
        return Err(Error::ClipTooShort(clip.len()));
    }
    let mut pairs: Vec<f64> = clip
        .frames
        .windows(2)
        .map(|w| {
            let n = w[0].pixels.len() as f64;
            w[0].pixels.iter().zip(&w[1].pixels).map(|(a, b)| ((b - a) as f64).powi(2)).sum::<f64>() / n
        })
        .collect();
    pairs.sort_by(f64::total_cmp);
    Ok(pairs.iter().sum::<f64>() / pairs.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Condition {
    Real,
    Proposed,
    #[serde(rename = "random")]
    RandomLatent,
}

impl Condition {
    pub const ALL: [Condition; 3] = [Condition::Real, Condition::Proposed, Condition::RandomLatent];
}

impl fmt::Display for Condition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Real => "real",
            Self::Proposed => "proposed",
            Self::RandomLatent => "random",
        })
    }
}

impl FromStr for Condition {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "real" => Ok(Self::Real),
            "proposed" => Ok(Self::Proposed),
            "random" | "random_latent" => Ok(Self::RandomLatent),
            other => Err(Error::Config(format!("unknown condition {other:?} (real|proposed|random)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MseReport {
    pub condition: Condition,
    pub n_videos: usize,
    pub mean: f64,
    /// Population standard deviation of the per-video values.
    pub std: f64,
}

impl MseReport {
    pub const CSV_HEADER: &'static str = "condition,n_videos,mean,std";

    pub fn from_clips(condition: Condition, clips: &[VideoClip]) -> Result<Self> {
        if clips.is_empty() {
            return Err(Error::Config("MSE report over zero videos".into()));
        }
        let per = clips.iter().map(consecutive_mse).collect::<Result<Vec<_>>>()?;
        let n = per.len() as f64;
        let mean = per.iter().sum::<f64>() / n;
        let var = per.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        Ok(Self { condition, n_videos: per.len(), mean, std: var.sqrt() })
    }

    pub fn csv_row(&self) -> String {
        format!("{},{},{:.6},{:.6}", self.condition, self.n_videos, self.mean, self.std)
    }
}

pub fn write_mse_csv(reports: &[MseReport], path: &Path) -> Result<()> {
    let mut text = String::from(MseReport::CSV_HEADER);
    text.push('\n');
    for r in reports {
        text.push_str(&r.csv_row());
        text.push('\n');
    }
    ensure_parent(path)?;
    std::fs::write(path, text).at(path)
}

/// Fresh simulator clips, independent of the training set for equal `seed`.
pub fn real_clips(spec: &ClipSpec, n: usize, seed: u64) -> Result<Vec<VideoClip>> {
    let base = seed::mix(seed, stream::SAMPLING);
    (0..n as u64).map(|i| generate_clip(base, i, spec)).collect()
}

pub fn proposed_clips(sampler: &VideoSampler, n: usize, seed: u64) -> Result<Vec<VideoClip>> {
    Ok(sampler.sample(n, seed)?.into_iter().map(|(c, _)| c).collect())
}

/// Clips whose frames decode independent prior latents.
pub fn random_latent_clips(generator: &FrameGenerator, n: usize, steps: usize, seed: u64) -> Result<Vec<VideoClip>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed::mix(seed, stream::SAMPLING + 1));
    (0..n)
        .map(|_| {
            let z = normal(&mut rng, &[steps, generator.spec().latent_dim], 0.0, 1.0);
            Ok(VideoClip { frames: tensor_to_frames(&generator.decode(&z)?)? })
        })
        .collect()
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

/// Symmetrized k-nearest-neighbour graph as adjacency lists with Euclidean
/// weights. Ties are broken by index.
pub fn knn_graph(points: &[Vec<f64>], k: usize) -> Vec<Vec<(usize, f64)>> {
    let m = points.len();
    let mut adj: Vec<Vec<(usize, f64)>> = vec![Vec::new(); m];
    for i in 0..m {
        let mut d: Vec<(f64, usize)> = (0..m).filter(|&j| j != i).map(|j| (dist(&points[i], &points[j]), j)).collect();
        d.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        for &(w, j) in d.iter().take(k) {
            adj[i].push((j, w));
            adj[j].push((i, w));
        }
    }
    for list in &mut adj {
        list.sort_by_key(|e| e.0);
        list.dedup_by(|a, b| a.0 == b.0);
    }
    adj
}

#[derive(PartialEq)]
struct Visit(f64, usize);

impl Eq for Visit {}

impl Ord for Visit {
    fn cmp(&self, other: &Self) -> Ordering {
        other.0.total_cmp(&self.0).then(other.1.cmp(&self.1))
    }
}

impl PartialOrd for Visit {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// All-pairs shortest paths by Dijkstra from every node; unreachable pairs
/// are infinite.
pub fn shortest_paths(adj: &[Vec<(usize, f64)>]) -> Vec<Vec<f64>> {
    let m = adj.len();
    (0..m)
        .map(|src| {
            let mut d = vec![f64::INFINITY; m];
            d[src] = 0.0;
            let mut heap = BinaryHeap::from([Visit(0.0, src)]);
            while let Some(Visit(du, u)) = heap.pop() {
                if du > d[u] {
                    continue;
                }
                for &(v, w) in &adj[u] {
                    let nd = du + w;
                    if nd < d[v] {
                        d[v] = nd;
                        heap.push(Visit(nd, v));
                    }
                }
            }
            d
        })
        .collect()
}

fn count_components(adj: &[Vec<(usize, f64)>]) -> usize {
    let mut seen = vec![false; adj.len()];
    let mut components = 0;
    for s in 0..adj.len() {
        if seen[s] {
            continue;
        }
        components += 1;
        let mut stack = vec![s];
        seen[s] = true;
        while let Some(u) = stack.pop() {
            for &(v, _) in &adj[u] {
                if !seen[v] {
                    seen[v] = true;
                    stack.push(v);
                }
            }
        }
    }
    components
}

/// Classical MDS of a distance matrix into `out_dim` coordinates. Each axis
/// is oriented so that its largest-magnitude coordinate is positive.
pub fn classical_mds(d: &[Vec<f64>], out_dim: usize) -> Result<Vec<Vec<f64>>> {
    let m = d.len();
    let sq = DMatrix::from_fn(m, m, |i, j| d[i][j] * d[i][j]);
    let row_means: Vec<f64> = (0..m).map(|i| sq.row(i).mean()).collect();
    let total = sq.mean();
    let b = DMatrix::from_fn(m, m, |i, j| -0.5 * (sq[(i, j)] - row_means[i] - row_means[j] + total));
    let eig = SymmetricEigen::new(b);
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &c| eig.eigenvalues[c].total_cmp(&eig.eigenvalues[a]));
    let top = eig.eigenvalues[order[0]].abs().max(f64::MIN_POSITIVE);
    let positive = order.iter().filter(|&&i| eig.eigenvalues[i] > 1e-12 * top).count();
    if positive < out_dim {
        return Err(Error::Degenerate { needed: out_dim, found: positive });
    }
    let mut coords = vec![vec![0.0; out_dim]; m];
    for (axis, &e) in order.iter().take(out_dim).enumerate() {
        let scale = eig.eigenvalues[e].sqrt();
        let col = eig.eigenvectors.column(e);
        let pivot = (0..m).max_by(|&a, &c| col[a].abs().total_cmp(&col[c].abs()).then(c.cmp(&a))).unwrap_or(0);
        let sign = if col[pivot] < 0.0 { -1.0 } else { 1.0 };
        for i in 0..m {
            coords[i][axis] = sign * scale * col[i];
        }
    }
    Ok(coords)
}

/// Smallest `k >= k_min` whose symmetrized kNN graph is connected.
pub fn min_connected_k(points: &[Vec<f64>], k_min: usize) -> Option<usize> {
    let m = points.len();
    if m < 2 {
        return None;
    }
    // connectivity only grows with k, so bisect
    let (mut lo, mut hi) = (k_min.max(1), m - 1);
    if lo > hi || count_components(&knn_graph(points, hi)) > 1 {
        return None;
    }
    while lo < hi {
        let mid = (lo + hi) / 2;
        if count_components(&knn_graph(points, mid)) == 1 {
            hi = mid;
        } else {
            lo = mid + 1;
        }
    }
    Some(lo)
}

/// Isomap: kNN graph, geodesic distances, classical MDS.
pub fn isomap_embed(points: &[Vec<f64>], k_neighbors: usize, out_dim: usize) -> Result<Vec<Vec<f64>>> {
    let m = points.len();
    if k_neighbors == 0 || m <= k_neighbors {
        return Err(Error::Config(format!("isomap needs 1 <= k < M (k={k_neighbors}, M={m})")));
    }
    let adj = knn_graph(points, k_neighbors);
    let components = count_components(&adj);
    if components > 1 {
        return Err(Error::Disconnected { components });
    }
    classical_mds(&shortest_paths(&adj), out_dim)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PointSource {
    Video,
    Prior,
    Interpolation,
}

impl fmt::Display for PointSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Video => "video",
            Self::Prior => "prior",
            Self::Interpolation => "interpolation",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingPoint {
    pub source: PointSource,
    pub sequence_id: usize,
    pub step: usize,
    pub coords: [f64; 2],
}

/// Latent points before embedding, in figure order: videos, prior samples,
/// then interpolation sequences.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentPoints {
    pub labels: Vec<(PointSource, usize, usize)>,
    pub values: Vec<Vec<f64>>,
}

pub fn collect_latent_points(
    sampler: &VideoSampler,
    n_videos: usize,
    n_prior: usize,
    n_interp_pairs: usize,
    seed: u64,
) -> Result<LatentPoints> {
    let videos: Vec<LatentSequence> = sampler.sample(n_videos, seed)?.into_iter().map(|(_, l)| l).collect();
    let dim = sampler.frames().spec().latent_dim;
    let steps = sampler.video().spec().steps;
    let mut labels = Vec::new();
    let mut values = Vec::new();
    for (v, seq) in videos.iter().enumerate() {
        for t in 0..seq.steps {
            labels.push((PointSource::Video, v, t));
            values.push(seq.step(t).iter().map(|&x| x as f64).collect());
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed::mix(seed, stream::SAMPLING + 2));
    let prior = normal::<f64, _>(&mut rng, &[n_prior, dim], 0.0, 1.0);
    for (i, row) in prior.data().chunks_exact(dim).enumerate() {
        labels.push((PointSource::Prior, i, 0));
        values.push(row.to_vec());
    }
    let ends = normal::<f64, _>(&mut rng, &[2 * n_interp_pairs, dim], 0.0, 1.0);
    for p in 0..n_interp_pairs {
        let a = &ends.data()[2 * p * dim..(2 * p + 1) * dim];
        let b = &ends.data()[(2 * p + 1) * dim..(2 * p + 2) * dim];
        for j in 0..steps {
            let t = if steps > 1 { j as f64 / (steps - 1) as f64 } else { 0.0 };
            labels.push((PointSource::Interpolation, p, j));
            values.push(a.iter().zip(b).map(|(x, y)| (1.0 - t) * x + t * y).collect());
        }
    }
    Ok(LatentPoints { labels, values })
}

/// Embeds the figure points. With `grow_k`, a disconnected neighbourhood
/// graph is retried with the smallest larger k that connects it; the k
/// actually used is returned.
pub fn embed_latent_points(points: &LatentPoints, k_neighbors: usize, grow_k: bool) -> Result<(Vec<EmbeddingPoint>, usize)> {
    let k = match isomap_embed(&points.values, k_neighbors, 2) {
        Err(Error::Disconnected { components }) if grow_k => {
            let k = min_connected_k(&points.values, k_neighbors).ok_or(Error::Disconnected { components })?;
            log::warn!("kNN graph with k={k_neighbors} has {components} components; embedding with k={k}");
            k
        }
        other => return Ok((label(points, other?), k_neighbors)),
    };
    Ok((label(points, isomap_embed(&points.values, k, 2)?), k))
}

fn label(points: &LatentPoints, coords: Vec<Vec<f64>>) -> Vec<EmbeddingPoint> {
    points
        .labels
        .iter()
        .zip(coords)
        .map(|(&(source, sequence_id, step), c)| EmbeddingPoint { source, sequence_id, step, coords: [c[0], c[1]] })
        .collect()
}

pub fn write_points_csv(points: &[EmbeddingPoint], path: &Path) -> Result<()> {
    let mut text = String::from("source,sequence_id,step,x,y\n");
    for p in points {
        text.push_str(&format!("{},{},{},{:.9},{:.9}\n", p.source, p.sequence_id, p.step, p.coords[0], p.coords[1]));
    }
    ensure_parent(path)?;
    std::fs::write(path, text).at(path)
}

fn ensure_parent(path: &Path) -> Result<()> {
    match path.parent().filter(|p| !p.as_os_str().is_empty()) {
        Some(dir) => std::fs::create_dir_all(dir).at(dir),
        None => Ok(()),
    }
}

fn write_png(path: &Path, width: usize, height: usize, color: png::ColorType, data: &[u8]) -> Result<()> {
    ensure_parent(path)?;
    let file = std::fs::File::create(path).at(path)?;
    let mut enc = png::Encoder::new(std::io::BufWriter::new(file), width as u32, height as u32);
    enc.set_color(color);
    enc.set_depth(png::BitDepth::Eight);
    let mut w = enc.write_header().map_err(|e| Error::Image(e.to_string()))?;
    w.write_image_data(data).map_err(|e| Error::Image(e.to_string()))?;
    w.finish().map_err(|e| Error::Image(e.to_string()))
}

pub fn quantize(p: f32) -> u8 {
    (255.0 * p.clamp(0.0, 1.0)).round() as u8
}

pub const SEPARATOR_GRAY: u8 = 128;

/// Lays frames out in a `rows x cols` grid with `sep`-pixel gray separators.
pub fn tile(frames: &[Frame], cols: usize, sep: usize) -> (usize, usize, Vec<u8>) {
    let (h, w) = (frames[0].height, frames[0].width);
    let rows = frames.len().div_ceil(cols);
    let width = cols * w + (cols - 1) * sep;
    let height = rows * h + (rows - 1) * sep;
    let mut img = vec![SEPARATOR_GRAY; width * height];
    for (i, f) in frames.iter().enumerate() {
        let (r0, c0) = ((i / cols) * (h + sep), (i % cols) * (w + sep));
        for r in 0..h {
            for c in 0..w {
                img[(r0 + r) * width + c0 + c] = quantize(f.get(r, c));
            }
        }
    }
    (width, height, img)
}

/// One horizontal strip per clip, written to `{stem}-{i}.png` next to `path`
/// (the `.png` extension of `path` is optional).
pub fn export_strips(clips: &[VideoClip], path: &Path, sep: usize) -> Result<Vec<PathBuf>> {
    if clips.is_empty() || clips.iter().any(VideoClip::is_empty) {
        return Err(Error::Config("no frames to export".into()));
    }
    let stem = path.with_extension("");
    clips
        .iter()
        .enumerate()
        .map(|(i, clip)| {
            let out = PathBuf::from(format!("{}-{i}.png", stem.display()));
            let (w, h, img) = tile(&clip.frames, clip.len(), sep);
            write_png(&out, w, h, png::ColorType::Grayscale, &img)?;
            Ok(out)
        })
        .collect()
}

/// Square-ish grid of frames.
pub fn export_grid(frames: &[Frame], path: &Path, sep: usize) -> Result<()> {
    if frames.is_empty() {
        return Err(Error::Config("no frames to export".into()));
    }
    let cols = (frames.len() as f64).sqrt().ceil() as usize;
    let (w, h, img) = tile(frames, cols, sep);
    write_png(path, w, h, png::ColorType::Grayscale, &img)
}

const VIDEO_COLORS: [[u8; 3]; 6] = [[31, 119, 180], [255, 127, 14], [214, 39, 40], [148, 103, 189], [140, 86, 75], [227, 119, 194]];

struct Canvas {
    size: usize,
    rgb: Vec<u8>,
}

impl Canvas {
    fn put(&mut self, x: i64, y: i64, c: [u8; 3]) {
        if x >= 0 && y >= 0 && (x as usize) < self.size && (y as usize) < self.size {
            let o = 3 * (y as usize * self.size + x as usize);
            self.rgb[o..o + 3].copy_from_slice(&c);
        }
    }

    fn circle(&mut self, cx: i64, cy: i64, r: i64, c: [u8; 3]) {
        for dy in -r..=r {
            for dx in -r..=r {
                let d2 = dx * dx + dy * dy;
                if d2 <= r * r && d2 >= (r - 1) * (r - 1) {
                    self.put(cx + dx, cy + dy, c);
                }
            }
        }
    }

    fn cross(&mut self, cx: i64, cy: i64, r: i64, c: [u8; 3]) {
        for d in -r..=r {
            self.put(cx + d, cy + d, c);
            self.put(cx + d, cy - d, c);
        }
    }

    fn triangle(&mut self, cx: i64, cy: i64, r: i64, c: [u8; 3]) {
        for dy in -r..=r {
            let half = (dy + r) / 2;
            for dx in -half..=half {
                self.put(cx + dx, cy + dy, c);
            }
        }
    }
}

/// Scatter plot of an embedding: videos as colored circles, prior samples as
/// green crosses, interpolations as black triangles.
pub fn write_scatter_png(points: &[EmbeddingPoint], path: &Path, size: usize) -> Result<()> {
    let mut canvas = Canvas { size, rgb: vec![255; 3 * size * size] };
    let (mut lo, mut hi) = ([f64::INFINITY; 2], [f64::NEG_INFINITY; 2]);
    for p in points {
        for a in 0..2 {
            lo[a] = lo[a].min(p.coords[a]);
            hi[a] = hi[a].max(p.coords[a]);
        }
    }
    let span = (hi[0] - lo[0]).max(hi[1] - lo[1]).max(1e-12);
    let margin = size as f64 * 0.05;
    let usable = size as f64 - 2.0 * margin;
    let to_px = |p: &EmbeddingPoint| {
        let x = margin + (p.coords[0] - lo[0]) / span * usable;
        let y = size as f64 - margin - (p.coords[1] - lo[1]) / span * usable;
        (x.round() as i64, y.round() as i64)
    };
    for source in [PointSource::Prior, PointSource::Interpolation, PointSource::Video] {
        for p in points.iter().filter(|p| p.source == source) {
            let (x, y) = to_px(p);
            match p.source {
                PointSource::Video => canvas.circle(x, y, 3, VIDEO_COLORS[p.sequence_id % VIDEO_COLORS.len()]),
                PointSource::Prior => canvas.cross(x, y, 3, [44, 160, 44]),
                PointSource::Interpolation => canvas.triangle(x, y, 3, [0, 0, 0]),
            }
        }
    }
    write_png(path, size, size, png::ColorType::Rgb, &canvas.rgb)
}
