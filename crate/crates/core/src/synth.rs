//! Sprite world with exact ground-truth tracks.
//!
//! Sprites are solid-colour squares or discs moving at constant integer
//! velocity and bouncing off the frame edges. Because the background is known
//! exactly, thresholded differencing recovers the tracks, which makes the
//! world its own object detector.

use std::collections::VecDeque;
use std::fs;
use std::path::Path;

use ndarray::{Array3, Array4, ArrayView3};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{derive_seed, SeededRng};
use crate::tracks::{BBox, BoxTrackSet, TrackedObject};
use crate::video::{save_frame, save_video, VideoShape, VideoTensor};

/// Per-pixel difference (max over channels) above which a pixel counts as object.
pub const DETECTION_THRESHOLD: f32 = 0.05;

const MAX_PLACEMENT_ATTEMPTS: usize = 1000;

const PALETTE: [[f32; 3]; 8] = [
    [0.95, 0.20, 0.20],
    [0.20, 0.90, 0.25],
    [0.25, 0.45, 1.00],
    [1.00, 0.90, 0.20],
    [0.95, 0.30, 0.95],
    [0.20, 0.95, 0.95],
    [1.00, 0.60, 0.10],
    [1.00, 1.00, 1.00],
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpriteShape {
    Square,
    Circle,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackgroundKind {
    Flat,
    Textured,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WorldConfig {
    pub num_objects: usize,
    pub sprite_size: usize,
    pub shape: SpriteShape,
    /// Draw each sprite's shape at random instead of using `shape`.
    pub mixed_shapes: bool,
    pub background: BackgroundKind,
    /// Maximum absolute velocity per axis, in pixels per frame.
    pub velocity_range: i64,
    pub n: usize,
    pub h: usize,
    pub w: usize,
    pub seed: u64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            num_objects: 2,
            sprite_size: 10,
            shape: SpriteShape::Square,
            mixed_shapes: false,
            background: BackgroundKind::Flat,
            velocity_range: 2,
            n: 16,
            h: 64,
            w: 64,
            seed: 0,
        }
    }
}

impl WorldConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_objects < 1 {
            return Err(Error::Config("num_objects must be at least 1".into()));
        }
        if self.n < 1 || self.h < 8 || self.w < 8 {
            return Err(Error::Config(format!(
                "video shape ({},{},{}) too small",
                self.n, self.h, self.w
            )));
        }
        if self.sprite_size < 1 || self.sprite_size > self.h.min(self.w) {
            return Err(Error::Config(format!(
                "sprite size {} does not fit a {}x{} frame",
                self.sprite_size, self.w, self.h
            )));
        }
        if self.velocity_range < 0 {
            return Err(Error::Config("velocity_range must be non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Sprite {
    pub x: i64,
    pub y: i64,
    pub vx: i64,
    pub vy: i64,
    pub size: i64,
    pub shape: SpriteShape,
    pub color: [f32; 3],
}

impl Sprite {
    pub fn bbox(&self) -> BBox {
        BBox::new(self.x, self.y, self.x + self.size, self.y + self.size)
    }

    fn covers(&self, dx: i64, dy: i64) -> bool {
        match self.shape {
            SpriteShape::Square => true,
            SpriteShape::Circle => {
                let r = self.size as f64 / 2.0;
                let cx = dx as f64 + 0.5 - r;
                let cy = dy as f64 + 0.5 - r;
                cx * cx + cy * cy <= r * r
            }
        }
    }

    /// Advance one frame, reflecting off the walls of a `w x h` frame.
    pub fn step(&mut self, w: i64, h: i64) {
        (self.x, self.vx) = bounce(self.x, self.vx, w - self.size);
        (self.y, self.vy) = bounce(self.y, self.vy, h - self.size);
    }
}

fn bounce(pos: i64, vel: i64, max: i64) -> (i64, i64) {
    if max <= 0 {
        return (0, 0);
    }
    let (mut p, mut v) = (pos + vel, vel);
    // Unfold reflections; a single step can cross a wall at most a few times.
    loop {
        if p < 0 {
            p = -p;
            v = -v;
        } else if p > max {
            p = 2 * max - p;
            v = -v;
        } else {
            return (p, v);
        }
    }
}

/// The background image for a world, shape (h, w, 3).
pub fn render_background(cfg: &WorldConfig, seed: u64) -> Array3<f32> {
    match cfg.background {
        BackgroundKind::Flat => Array3::from_elem((cfg.h, cfg.w, 3), 0.15),
        BackgroundKind::Textured => {
            let mut rng = SeededRng::stream(seed, "background");
            let r = rng.rng();
            let waves: Vec<(f64, f64, f64, usize)> = (0..4)
                .map(|i| {
                    (
                        r.gen_range(0.5..2.5) * std::f64::consts::TAU / cfg.w as f64,
                        r.gen_range(0.5..2.5) * std::f64::consts::TAU / cfg.h as f64,
                        r.gen_range(0.0..std::f64::consts::TAU),
                        i % 3,
                    )
                })
                .collect();
            Array3::from_shape_fn((cfg.h, cfg.w, 3), |(y, x, c)| {
                let mut v = 0.22;
                for &(fx, fy, phase, ch) in &waves {
                    let amp = if ch == c { 0.08 } else { 0.03 };
                    v += amp * (fx * x as f64 + fy * y as f64 + phase).sin();
                }
                v.clamp(0.0, 1.0) as f32
            })
        }
    }
}

/// Boxes of a sprite over `n` frames, starting with its current position.
pub fn trajectory(sprite: &Sprite, n: usize, w: usize, h: usize) -> Vec<BBox> {
    let mut s = *sprite;
    (0..n)
        .map(|t| {
            if t > 0 {
                s.step(w as i64, h as i64);
            }
            s.bbox()
        })
        .collect()
}

/// Place sprites at random with random velocities such that no two sprites
/// touch (one pixel of clearance) in any frame of the episode.
pub fn sample_sprites(cfg: &WorldConfig, seed: u64) -> Result<Vec<Sprite>> {
    cfg.validate()?;
    let mut rng = SeededRng::stream(seed, "sprites");
    let r = rng.rng();
    let size = cfg.sprite_size as i64;
    let v = cfg.velocity_range;
    let mut sprites: Vec<Sprite> = Vec::with_capacity(cfg.num_objects);
    let mut paths: Vec<Vec<BBox>> = Vec::with_capacity(cfg.num_objects);
    for i in 0..cfg.num_objects {
        let mut placed = None;
        for _ in 0..MAX_PLACEMENT_ATTEMPTS {
            let shape = if cfg.mixed_shapes {
                if r.gen_bool(0.5) {
                    SpriteShape::Square
                } else {
                    SpriteShape::Circle
                }
            } else {
                cfg.shape
            };
            let candidate = Sprite {
                x: r.gen_range(0..=(cfg.w as i64 - size)),
                y: r.gen_range(0..=(cfg.h as i64 - size)),
                vx: r.gen_range(-v..=v),
                vy: r.gen_range(-v..=v),
                size,
                shape,
                color: PALETTE[i % PALETTE.len()],
            };
            let path = trajectory(&candidate, cfg.n, cfg.w, cfg.h);
            let clear = paths.iter().all(|other| {
                path.iter().zip(other).all(|(a, b)| {
                    let grown = BBox::new(a.x0 - 1, a.y0 - 1, a.x1 + 1, a.y1 + 1);
                    grown.intersection_area(b) == 0
                })
            });
            if clear {
                placed = Some((candidate, path));
                break;
            }
        }
        let (sprite, path) = placed.ok_or(Error::Placement {
            attempts: MAX_PLACEMENT_ATTEMPTS,
        })?;
        sprites.push(sprite);
        paths.push(path);
    }
    Ok(sprites)
}

/// Render given initial sprite states over `background` for `cfg.n` frames.
pub fn render_episode(
    cfg: &WorldConfig,
    background: &Array3<f32>,
    sprites: &[Sprite],
) -> Result<(VideoTensor, BoxTrackSet)> {
    let (h, w) = (cfg.h as i64, cfg.w as i64);
    let mut state = sprites.to_vec();
    let mut video = Array4::<f32>::zeros((cfg.n, cfg.h, cfg.w, 3));
    let mut objects: Vec<TrackedObject> = (0..state.len())
        .map(|id| TrackedObject {
            id: id as i64,
            boxes: Vec::with_capacity(cfg.n),
        })
        .collect();
    for t in 0..cfg.n {
        if t > 0 {
            for s in &mut state {
                s.step(w, h);
            }
        }
        let mut frame = video.index_axis_mut(ndarray::Axis(0), t);
        frame.assign(background);
        for (s, obj) in state.iter().zip(objects.iter_mut()) {
            for dy in 0..s.size {
                for dx in 0..s.size {
                    if s.covers(dx, dy) {
                        let (py, px) = ((s.y + dy) as usize, (s.x + dx) as usize);
                        for c in 0..3 {
                            frame[[py, px, c]] = s.color[c];
                        }
                    }
                }
            }
            obj.boxes.push(Some(s.bbox()));
        }
    }
    let tracks = BoxTrackSet::new(cfg.n, cfg.w, cfg.h, objects)?;
    Ok((VideoTensor::new(video)?, tracks))
}

#[derive(Debug, Clone)]
pub struct Episode {
    pub video: VideoTensor,
    pub tracks: BoxTrackSet,
    pub background: Array3<f32>,
}

/// Generate one episode. Deterministic in `(cfg, seed)`.
pub fn generate_episode(cfg: &WorldConfig, seed: u64) -> Result<Episode> {
    cfg.validate()?;
    let background = render_background(cfg, seed);
    let sprites = sample_sprites(cfg, seed)?;
    let (video, tracks) = render_episode(cfg, &background, &sprites)?;
    Ok(Episode {
        video,
        tracks,
        background,
    })
}

/// Foreground pixels of one frame: max-over-channels difference above `threshold`.
pub fn difference_mask(frame: ArrayView3<'_, f32>, background: ArrayView3<'_, f32>, threshold: f32) -> Vec<Vec<bool>> {
    let (h, w, c) = frame.dim();
    (0..h)
        .map(|y| {
            (0..w)
                .map(|x| (0..c).any(|ch| (frame[[y, x, ch]] - background[[y, x, ch]]).abs() > threshold))
                .collect()
        })
        .collect()
}

/// Bounding boxes of the 8-connected components of a boolean mask.
pub fn connected_boxes(mask: &[Vec<bool>]) -> Vec<BBox> {
    let h = mask.len();
    let w = mask.first().map_or(0, |r| r.len());
    let mut seen = vec![vec![false; w]; h];
    let mut boxes = Vec::new();
    for sy in 0..h {
        for sx in 0..w {
            if !mask[sy][sx] || seen[sy][sx] {
                continue;
            }
            let mut b = BBox::new(sx as i64, sy as i64, sx as i64 + 1, sy as i64 + 1);
            let mut queue = VecDeque::from([(sy, sx)]);
            seen[sy][sx] = true;
            while let Some((y, x)) = queue.pop_front() {
                b.x0 = b.x0.min(x as i64);
                b.y0 = b.y0.min(y as i64);
                b.x1 = b.x1.max(x as i64 + 1);
                b.y1 = b.y1.max(y as i64 + 1);
                for dy in -1i64..=1 {
                    for dx in -1i64..=1 {
                        let (ny, nx) = (y as i64 + dy, x as i64 + dx);
                        if ny < 0 || nx < 0 || ny >= h as i64 || nx >= w as i64 {
                            continue;
                        }
                        let (ny, nx) = (ny as usize, nx as usize);
                        if mask[ny][nx] && !seen[ny][nx] {
                            seen[ny][nx] = true;
                            queue.push_back((ny, nx));
                        }
                    }
                }
            }
            boxes.push(b);
        }
    }
    boxes
}

/// Detect and track objects against a known clean background.
///
/// Detections in each frame are associated with existing tracks by greedy
/// nearest-centroid matching; unmatched detections start new tracks.
pub fn oracle_detect(video: &VideoTensor, background: ArrayView3<'_, f32>) -> BoxTrackSet {
    oracle_detect_with(video, background, DetectOptions::default())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DetectOptions {
    pub threshold: f32,
    /// Components with fewer bounding-box pixels than this are dropped.
    pub min_area: i64,
}

impl Default for DetectOptions {
    fn default() -> Self {
        Self {
            threshold: DETECTION_THRESHOLD,
            min_area: 1,
        }
    }
}

pub fn oracle_detect_with(video: &VideoTensor, background: ArrayView3<'_, f32>, opts: DetectOptions) -> BoxTrackSet {
    let s = video.shape();
    let mut objects: Vec<TrackedObject> = Vec::new();
    let mut last_center: Vec<(f64, f64)> = Vec::new();
    for t in 0..s.n {
        let mask = difference_mask(video.frame(t), background, opts.threshold);
        let dets: Vec<BBox> = connected_boxes(&mask)
            .into_iter()
            .filter(|b| b.area() >= opts.min_area)
            .collect();
        let mut pairs: Vec<(f64, usize, usize)> = Vec::new();
        for (ti, c) in last_center.iter().enumerate() {
            for (di, d) in dets.iter().enumerate() {
                let (dx, dy) = (d.center().0 - c.0, d.center().1 - c.1);
                pairs.push((dx * dx + dy * dy, ti, di));
            }
        }
        pairs.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
        let mut track_used = vec![false; objects.len()];
        let mut det_used = vec![false; dets.len()];
        for obj in &mut objects {
            obj.boxes.push(None);
        }
        for (_, ti, di) in pairs {
            if track_used[ti] || det_used[di] {
                continue;
            }
            track_used[ti] = true;
            det_used[di] = true;
            objects[ti].boxes[t] = Some(dets[di]);
            last_center[ti] = dets[di].center();
        }
        for (di, d) in dets.iter().enumerate() {
            if det_used[di] {
                continue;
            }
            let mut boxes = vec![None; t + 1];
            boxes[t] = Some(*d);
            objects.push(TrackedObject {
                id: objects.len() as i64,
                boxes,
            });
            last_center.push(d.center());
        }
    }
    BoxTrackSet {
        num_frames: s.n,
        width: s.w,
        height: s.h,
        objects,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetIndex {
    pub episodes: Vec<String>,
    pub config: WorldConfig,
}

pub fn episode_name(i: usize) -> String {
    format!("ep_{i:04}")
}

/// Write `count` episodes under `out_dir` plus an `index.json`.
///
/// Each episode directory holds `frames/`, `tracks.json` and the clean
/// `background.png` used for oracle detection.
pub fn generate_dataset(cfg: &WorldConfig, count: usize, out_dir: &Path) -> Result<DatasetIndex> {
    cfg.validate()?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut episodes = Vec::with_capacity(count);
    for i in 0..count {
        let name = episode_name(i);
        let dir = out_dir.join(&name);
        let ep = generate_episode(cfg, derive_seed(cfg.seed, &name))?;
        save_video(&ep.video, &dir.join("frames"))?;
        crate::tracks::save_tracks(&ep.tracks, &dir.join("tracks.json"))?;
        save_frame(ep.background.view(), &dir.join("background.png"))?;
        episodes.push(name);
    }
    let index = DatasetIndex {
        episodes,
        config: cfg.clone(),
    };
    let path = out_dir.join("index.json");
    fs::write(&path, serde_json::to_vec_pretty(&index)?).map_err(|e| Error::io(&path, e))?;
    Ok(index)
}

pub fn load_index(dir: &Path) -> Result<DatasetIndex> {
    let path = dir.join("index.json");
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    Ok(serde_json::from_str(&text)?)
}

/// Shape of the videos produced by a world.
pub fn world_shape(cfg: &WorldConfig) -> VideoShape {
    VideoShape::new(cfg.n, cfg.h, cfg.w, 3)
}
