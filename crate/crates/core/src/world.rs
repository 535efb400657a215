//! Deterministic 2D block world: an agent disc translating among
//! axis-aligned walls inside a square arena.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{HtmError, Result};
use crate::rng::stream;

/// Axis-aligned rectangle given by centre and half-extents.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Wall {
    pub cx: f64,
    pub cy: f64,
    pub half_w: f64,
    pub half_h: f64,
}

impl Wall {
    pub fn min(&self) -> (f64, f64) {
        (self.cx - self.half_w, self.cy - self.half_h)
    }

    pub fn max(&self) -> (f64, f64) {
        (self.cx + self.half_w, self.cy + self.half_h)
    }

    /// Euclidean distance from a point to the rectangle (0 inside).
    pub fn distance_to(&self, x: f64, y: f64) -> f64 {
        let dx = (x - self.cx).abs() - self.half_w;
        let dy = (y - self.cy).abs() - self.half_h;
        dx.max(0.0).hypot(dy.max(0.0))
    }

    /// Distance from segment `a→b` to the rectangle (0 if they touch).
    pub fn segment_distance(&self, a: (f64, f64), b: (f64, f64)) -> f64 {
        if self.segment_intersects(a, b) {
            return 0.0;
        }
        let (x0, y0) = self.min();
        let (x1, y1) = self.max();
        let mut d = self.distance_to(a.0, a.1).min(self.distance_to(b.0, b.1));
        for corner in [(x0, y0), (x0, y1), (x1, y0), (x1, y1)] {
            d = d.min(point_segment_distance(corner, a, b));
        }
        d
    }

    /// Liang–Barsky clip of the segment against the closed rectangle.
    fn segment_intersects(&self, a: (f64, f64), b: (f64, f64)) -> bool {
        let (x0, y0) = self.min();
        let (x1, y1) = self.max();
        let (dx, dy) = (b.0 - a.0, b.1 - a.1);
        let mut t0 = 0.0_f64;
        let mut t1 = 1.0_f64;
        for (p, q) in [
            (-dx, a.0 - x0),
            (dx, x1 - a.0),
            (-dy, a.1 - y0),
            (dy, y1 - a.1),
        ] {
            if p == 0.0 {
                if q < 0.0 {
                    return false;
                }
            } else {
                let r = q / p;
                if p < 0.0 {
                    t0 = t0.max(r);
                } else {
                    t1 = t1.min(r);
                }
                if t0 > t1 {
                    return false;
                }
            }
        }
        true
    }

    /// Area of the intersection with another axis-aligned box.
    fn overlap_area(&self, lo: (f64, f64), hi: (f64, f64)) -> f64 {
        let (x0, y0) = self.min();
        let (x1, y1) = self.max();
        let w = (x1.min(hi.0) - x0.max(lo.0)).max(0.0);
        let h = (y1.min(hi.1) - y0.max(lo.1)).max(0.0);
        w * h
    }
}

fn point_segment_distance(p: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = dx * dx + dy * dy;
    let t = if len2 == 0.0 {
        0.0
    } else {
        (((p.0 - a.0) * dx + (p.1 - a.1) * dy) / len2).clamp(0.0, 1.0)
    };
    (p.0 - (a.0 + t * dx)).hypot(p.1 - (a.1 + t * dy))
}

/// One obstacle configuration; fully determines the dynamics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Context {
    pub id: u64,
    pub arena: f64,
    pub walls: Vec<Wall>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AgentState {
    pub x: f64,
    pub y: f64,
}

impl AgentState {
    pub fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn distance(&self, other: &AgentState) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }

    fn xy(&self) -> (f64, f64) {
        (self.x, self.y)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Action {
    pub dx: f64,
    pub dy: f64,
}

impl Action {
    pub fn new(dx: f64, dy: f64) -> Self {
        Self { dx, dy }
    }

    /// Componentwise clamp into `[-a_max, a_max]²`.
    pub fn clamped(self, a_max: f64) -> Self {
        Self {
            dx: self.dx.clamp(-a_max, a_max),
            dy: self.dy.clamp(-a_max, a_max),
        }
    }

    pub fn norm(&self) -> f64 {
        self.dx.hypot(self.dy)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ObsMode {
    #[default]
    State,
    Raster,
}

impl ObsMode {
    pub fn as_str(self) -> &'static str {
        match self {
            ObsMode::State => "state",
            ObsMode::Raster => "raster",
        }
    }
}

/// Rendered agent state: `(x/S, y/S)` in state mode, a flattened G×G
/// occupancy grid in raster mode. Every entry lies in `[0, 1]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub mode: ObsMode,
    pub data: Vec<f64>,
}

impl Observation {
    pub fn new(mode: ObsMode, data: Vec<f64>) -> Self {
        Self { mode, data }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

/// Fixed-length rendering of a context for conditioning the learned models.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContextEncoding(pub Vec<f64>);

impl ContextEncoding {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Orientation {
    Vertical,
    Horizontal,
    Mixed,
}

/// Ranges from which context walls are drawn.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WallSpec {
    pub min_count: usize,
    pub max_count: usize,
    pub orientation: Orientation,
    /// Wall length as a fraction of the arena side.
    pub length_frac: [f64; 2],
    pub half_thickness: [f64; 2],
    /// Wall centre along the axis perpendicular to it, as a fraction of the arena side.
    pub position_frac: [f64; 2],
    /// Walls touch the top/bottom (or left/right) edge, leaving one gap.
    pub attach_to_edge: bool,
}

impl Default for WallSpec {
    fn default() -> Self {
        Self {
            min_count: 1,
            max_count: 1,
            orientation: Orientation::Vertical,
            length_frac: [0.55, 0.75],
            half_thickness: [0.1, 0.15],
            position_frac: [0.35, 0.65],
            attach_to_edge: true,
        }
    }
}

/// Geometry and dynamics parameters shared by every context.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorldConfig {
    pub arena: f64,
    pub radius: f64,
    pub a_max: f64,
    pub grid: usize,
    pub walls: WallSpec,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            arena: 2.8,
            radius: 0.15,
            a_max: 0.1,
            grid: 16,
            walls: WallSpec::default(),
        }
    }
}

const CONTEXT_RETRIES: usize = 1000;
const TASK_RETRIES: usize = 10_000;
const FLOOD_RESOLUTION: f64 = 0.02;

impl WorldConfig {
    pub fn validate(&self) -> Result<()> {
        let cfg = |key: &str, msg: String| Err(HtmError::Config { key: format!("world.{key}"), msg });
        if !(self.arena.is_finite() && self.arena > 0.0) {
            return cfg("arena", "must be positive".into());
        }
        if !(self.radius > 0.0 && 2.0 * self.radius < self.arena) {
            return cfg("radius", "must be positive and fit in the arena".into());
        }
        if !(self.a_max > 0.0 && self.a_max < self.arena) {
            return cfg("a_max", "must be positive and smaller than the arena".into());
        }
        if self.grid == 0 || self.grid > 256 {
            return cfg("grid", "must be in 1..=256".into());
        }
        let w = &self.walls;
        if w.min_count > w.max_count || w.max_count > 16 {
            return cfg("walls.max_count", "need min_count <= max_count <= 16".into());
        }
        let range_ok = |r: [f64; 2], lo: f64, hi: f64| r[0] <= r[1] && r[0] >= lo && r[1] <= hi;
        if !range_ok(w.length_frac, 0.0, 1.0) || w.length_frac[0] <= 0.0 {
            return cfg("walls.length_frac", "must be an ordered range within (0, 1]".into());
        }
        if !range_ok(w.half_thickness, 0.0, self.arena / 2.0) || w.half_thickness[0] <= 0.0 {
            return cfg(
                "walls.half_thickness",
                "must be an ordered positive range no larger than half the arena".into(),
            );
        }
        if !range_ok(w.position_frac, 0.0, 1.0) {
            return cfg("walls.position_frac", "must be an ordered range within [0, 1]".into());
        }
        Ok(())
    }

    /// Length of a state-mode context encoding (4 numbers per wall slot).
    pub fn context_dim(&self, mode: ObsMode) -> usize {
        match mode {
            ObsMode::State => 4 * self.walls.max_count.max(1),
            ObsMode::Raster => self.grid * self.grid,
        }
    }

    pub fn obs_dim(&self, mode: ObsMode) -> usize {
        match mode {
            ObsMode::State => 2,
            ObsMode::Raster => self.grid * self.grid,
        }
    }

    fn cell(&self) -> f64 {
        self.arena / self.grid as f64
    }
}

/// Draws a context whose walls satisfy the spec and whose free space is
/// connected. Deterministic in `(seed, id)`.
pub fn generate_context(seed: u64, id: u64, world: &WorldConfig) -> Result<Context> {
    world.validate()?;
    let mut rng = stream(seed, id);
    for _ in 0..CONTEXT_RETRIES {
        let walls = draw_walls(&mut rng, world);
        let ctx = Context {
            id,
            arena: world.arena,
            walls,
        };
        if context_invariants_hold(&ctx) && free_space_connected(&ctx, world) {
            return Ok(ctx);
        }
    }
    Err(HtmError::Config {
        key: "world.walls".into(),
        msg: format!("no context with connected free space after {CONTEXT_RETRIES} draws"),
    })
}

fn draw_walls(rng: &mut ChaCha8Rng, world: &WorldConfig) -> Vec<Wall> {
    let spec = &world.walls;
    let s = world.arena;
    let count = rng.random_range(spec.min_count..=spec.max_count);
    let uniform = |rng: &mut ChaCha8Rng, r: [f64; 2]| {
        if r[0] == r[1] {
            r[0]
        } else {
            rng.random_range(r[0]..r[1])
        }
    };
    (0..count)
        .map(|_| {
            let vertical = match spec.orientation {
                Orientation::Vertical => true,
                Orientation::Horizontal => false,
                Orientation::Mixed => rng.random_bool(0.5),
            };
            let half_len = 0.5 * s * uniform(rng, spec.length_frac);
            let half_thick = uniform(rng, spec.half_thickness);
            let across = s * uniform(rng, spec.position_frac);
            let along = if spec.attach_to_edge {
                if rng.random_bool(0.5) {
                    half_len
                } else {
                    s - half_len
                }
            } else {
                rng.random_range(half_len..=s - half_len)
            };
            let across = across.clamp(half_thick, s - half_thick);
            if vertical {
                Wall {
                    cx: across,
                    cy: along,
                    half_w: half_thick,
                    half_h: half_len,
                }
            } else {
                Wall {
                    cx: along,
                    cy: across,
                    half_w: half_len,
                    half_h: half_thick,
                }
            }
        })
        .collect()
}

/// Every wall inside `[0, S]²` with positive half-extents.
pub fn context_invariants_hold(ctx: &Context) -> bool {
    ctx.walls.iter().all(|w| {
        let (x0, y0) = w.min();
        let (x1, y1) = w.max();
        w.half_w > 0.0
            && w.half_h > 0.0
            && x0 >= -1e-12
            && y0 >= -1e-12
            && x1 <= ctx.arena + 1e-12
            && y1 <= ctx.arena + 1e-12
    })
}

/// Flood fill over a fine lattice of agent centres; true when every valid
/// lattice point is 4-connected to every other and at least one exists.
pub fn free_space_connected(ctx: &Context, world: &WorldConfig) -> bool {
    let lo = world.radius;
    let hi = ctx.arena - world.radius;
    let n = ((hi - lo) / FLOOD_RESOLUTION).floor() as usize + 1;
    let pos = |i: usize| lo + i as f64 * FLOOD_RESOLUTION;
    let mut valid = vec![false; n * n];
    let mut total = 0usize;
    let mut seed = None;
    for iy in 0..n {
        for ix in 0..n {
            if is_valid(ctx, world, &AgentState::new(pos(ix), pos(iy))) {
                valid[iy * n + ix] = true;
                total += 1;
                seed.get_or_insert(iy * n + ix);
            }
        }
    }
    let Some(seed) = seed else { return false };
    let mut seen = vec![false; n * n];
    let mut stack = vec![seed];
    seen[seed] = true;
    let mut reached = 0usize;
    while let Some(k) = stack.pop() {
        reached += 1;
        let (ix, iy) = (k % n, k / n);
        let mut visit = |jx: usize, jy: usize| {
            let j = jy * n + jx;
            if valid[j] && !seen[j] {
                seen[j] = true;
                stack.push(j);
            }
        };
        if ix > 0 {
            visit(ix - 1, iy);
        }
        if ix + 1 < n {
            visit(ix + 1, iy);
        }
        if iy > 0 {
            visit(ix, iy - 1);
        }
        if iy + 1 < n {
            visit(ix, iy + 1);
        }
    }
    reached == total
}

/// Agent disc inside the arena and clear of every wall.
pub fn is_valid(ctx: &Context, world: &WorldConfig, s: &AgentState) -> bool {
    let r = world.radius;
    s.x.is_finite()
        && s.y.is_finite()
        && s.x >= r
        && s.x <= ctx.arena - r
        && s.y >= r
        && s.y <= ctx.arena - r
        && ctx.walls.iter().all(|w| w.distance_to(s.x, s.y) >= r)
}

/// True when the disc swept along the segment `a→b` stays inside the arena
/// and clear of every wall.
pub fn sweep_is_free(ctx: &Context, world: &WorldConfig, a: &AgentState, b: &AgentState) -> bool {
    let r = world.radius;
    let inside = |s: &AgentState| {
        s.x >= r && s.x <= ctx.arena - r && s.y >= r && s.y <= ctx.arena - r
    };
    inside(a)
        && inside(b)
        && ctx
            .walls
            .iter()
            .all(|w| w.segment_distance(a.xy(), b.xy()) >= r)
}

/// One transition: clamp the action, then translate unless the swept disc
/// would collide, in which case the agent stays put.
pub fn step(ctx: &Context, world: &WorldConfig, s: &AgentState, a: &Action) -> AgentState {
    let a = a.clamped(world.a_max);
    let next = AgentState::new(s.x + a.dx, s.y + a.dy);
    if sweep_is_free(ctx, world, s, &next) {
        next
    } else {
        *s
    }
}

/// Rejection-samples a valid agent state uniformly over free space.
pub fn sample_free_state(ctx: &Context, world: &WorldConfig, rng: &mut ChaCha8Rng) -> Result<AgentState> {
    let (lo, hi) = (world.radius, ctx.arena - world.radius);
    for _ in 0..TASK_RETRIES {
        let s = AgentState::new(rng.random_range(lo..=hi), rng.random_range(lo..=hi));
        if is_valid(ctx, world, &s) {
            return Ok(s);
        }
    }
    Err(HtmError::Generation(format!("context {} has no free space", ctx.id)))
}

pub fn random_action(world: &WorldConfig, rng: &mut ChaCha8Rng) -> Action {
    let a = world.a_max;
    Action::new(rng.random_range(-a..=a), rng.random_range(-a..=a))
}

/// Renders an agent state.
pub fn observe(ctx: &Context, world: &WorldConfig, s: &AgentState, mode: ObsMode) -> Observation {
    match mode {
        ObsMode::State => Observation::new(
            mode,
            vec![
                (s.x / ctx.arena).clamp(0.0, 1.0),
                (s.y / ctx.arena).clamp(0.0, 1.0),
            ],
        ),
        ObsMode::Raster => Observation::new(mode, rasterize_disc(world, s)),
    }
}

/// Cell `(row, col)` covers `x ∈ [col·c, (col+1)·c]`, `y ∈ [row·c, (row+1)·c]`;
/// flattened row-major with row 0 at `y = 0`. A cell's value is
/// `max(0, 1 - d/ρ)`, `d` being the distance from the disc centre to the cell,
/// so exactly the cells the open disc overlaps are positive.
fn rasterize_disc(world: &WorldConfig, s: &AgentState) -> Vec<f64> {
    let g = world.grid;
    let c = world.cell();
    let mut out = vec![0.0; g * g];
    for row in 0..g {
        for col in 0..g {
            let cell = Wall {
                cx: (col as f64 + 0.5) * c,
                cy: (row as f64 + 0.5) * c,
                half_w: c / 2.0,
                half_h: c / 2.0,
            };
            let d = cell.distance_to(s.x, s.y);
            out[row * g + col] = (1.0 - d / world.radius).max(0.0);
        }
    }
    out
}

/// Context conditioning vector: normalised wall parameters padded to
/// `max_count` walls (state mode) or the wall-area fraction of every cell
/// (raster mode).
pub fn encode_context(ctx: &Context, world: &WorldConfig, mode: ObsMode) -> ContextEncoding {
    match mode {
        ObsMode::State => {
            let slots = world.walls.max_count.max(1);
            let mut v = vec![0.0; 4 * slots];
            for (i, w) in ctx.walls.iter().take(slots).enumerate() {
                let s = ctx.arena;
                v[4 * i] = (w.cx / s).clamp(0.0, 1.0);
                v[4 * i + 1] = (w.cy / s).clamp(0.0, 1.0);
                v[4 * i + 2] = (w.half_w / s).clamp(0.0, 1.0);
                v[4 * i + 3] = (w.half_h / s).clamp(0.0, 1.0);
            }
            ContextEncoding(v)
        }
        ObsMode::Raster => {
            let g = world.grid;
            let c = world.cell();
            let mut v = vec![0.0; g * g];
            for row in 0..g {
                for col in 0..g {
                    let lo = (col as f64 * c, row as f64 * c);
                    let hi = (lo.0 + c, lo.1 + c);
                    let area: f64 = ctx.walls.iter().map(|w| w.overlap_area(lo, hi)).sum();
                    v[row * g + col] = (area / (c * c)).clamp(0.0, 1.0);
                }
            }
            ContextEncoding(v)
        }
    }
}

/// Recovers the agent state from an observation (exact in state mode,
/// raster centroid otherwise).
pub fn decode(world: &WorldConfig, obs: &Observation) -> Result<AgentState> {
    if obs.data.iter().any(|v| !v.is_finite()) {
        return Err(HtmError::Evaluation("observation has non-finite entries".into()));
    }
    match obs.mode {
        ObsMode::State => {
            if obs.data.len() != 2 {
                return Err(HtmError::Evaluation(format!(
                    "state observation of length {}",
                    obs.data.len()
                )));
            }
            Ok(AgentState::new(obs.data[0] * world.arena, obs.data[1] * world.arena))
        }
        ObsMode::Raster => {
            let g = world.grid;
            if obs.data.len() != g * g {
                return Err(HtmError::Evaluation(format!(
                    "raster observation of length {}, expected {}",
                    obs.data.len(),
                    g * g
                )));
            }
            let c = world.cell();
            let (mut mass, mut sx, mut sy) = (0.0, 0.0, 0.0);
            for row in 0..g {
                for col in 0..g {
                    let v = obs.data[row * g + col].max(0.0);
                    mass += v;
                    sx += v * (col as f64 + 0.5) * c;
                    sy += v * (row as f64 + 0.5) * c;
                }
            }
            if mass <= 1e-9 {
                return Err(HtmError::Evaluation("raster observation is empty".into()));
            }
            Ok(AgentState::new(sx / mass, sy / mass))
        }
    }
}

/// Conservative reachability: the straight sweep `a→b` is collision-free
/// and each coordinate differs by at most `h·a_max`, so a controller moving
/// along the segment in `h` equal steps stays within the action bounds.
pub fn oracle_reachable(
    ctx: &Context,
    world: &WorldConfig,
    a: &Observation,
    b: &Observation,
    h: usize,
) -> Result<bool> {
    if a == b {
        decode(world, a)?;
        return Ok(true);
    }
    let sa = decode(world, a)?;
    let sb = decode(world, b)?;
    Ok(states_reachable(ctx, world, &sa, &sb, h))
}

pub fn states_reachable(ctx: &Context, world: &WorldConfig, a: &AgentState, b: &AgentState, h: usize) -> bool {
    let reach = h as f64 * world.a_max;
    (a.x - b.x).abs() <= reach + 1e-12
        && (a.y - b.y).abs() <= reach + 1e-12
        && sweep_is_free(ctx, world, a, b)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Difficulty {
    Any,
    CrossWall,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Task {
    pub id: u64,
    pub context: Context,
    pub start: AgentState,
    pub goal: AgentState,
    pub threshold: f64,
}

/// Draws a start/goal pair further apart than `threshold`. Cross-wall tasks
/// additionally have their straight start→goal sweep blocked by a wall.
pub fn make_task(
    ctx: &Context,
    world: &WorldConfig,
    seed: u64,
    id: u64,
    difficulty: Difficulty,
    threshold: f64,
) -> Result<Task> {
    let mut rng = stream(seed, id);
    for _ in 0..TASK_RETRIES {
        let start = sample_free_state(ctx, world, &mut rng)?;
        let goal = sample_free_state(ctx, world, &mut rng)?;
        if start.distance(&goal) <= threshold {
            continue;
        }
        let ok = match difficulty {
            Difficulty::Any => true,
            Difficulty::CrossWall => {
                ctx.walls.iter().any(|w| w.segment_distance(start.xy(), goal.xy()) < world.radius)
            }
        };
        if ok {
            return Ok(Task {
                id,
                context: ctx.clone(),
                start,
                goal,
                threshold,
            });
        }
    }
    Err(HtmError::Generation(format!(
        "no {difficulty:?} task in context {} after {TASK_RETRIES} draws",
        ctx.id
    )))
}
