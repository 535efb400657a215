//! Binary PPM plan strips.

use htm_core::world::{decode, AgentState, Context, Observation, WorldConfig};
use htm_core::{HtmError, Result};

const BACKGROUND: [u8; 3] = [150, 150, 150];
const WALL: [u8; 3] = [30, 30, 30];
const AGENT: [u8; 3] = [240, 240, 240];
const GOAL: [u8; 3] = [210, 40, 40];

/// One `panel × panel` square per plan node, left to right: walls dark,
/// agent disc light, goal marked by a red ring. The image's top row is the
/// arena's top edge.
pub fn render_plan(
    nodes: &[Observation],
    ctx: &Context,
    world: &WorldConfig,
    goal: Option<AgentState>,
    panel: usize,
) -> Result<Vec<u8>> {
    if nodes.is_empty() {
        return Err(HtmError::Empty("plan has no nodes to render".into()));
    }
    if panel == 0 {
        return Err(HtmError::Config {
            key: "panel".into(),
            msg: "must be at least 1 pixel".into(),
        });
    }
    let agents = nodes.iter().map(|o| decode(world, o)).collect::<Result<Vec<_>>>()?;
    let width = panel * nodes.len();
    let mut pixels = vec![0u8; width * panel * 3];
    let scale = world.arena / panel as f64;
    let ring = 2.0 * scale;
    for py in 0..panel {
        let y = world.arena - (py as f64 + 0.5) * scale;
        for px in 0..panel {
            let x = (px as f64 + 0.5) * scale;
            let base = if ctx.walls.iter().any(|w| w.distance_to(x, y) <= 0.0) {
                WALL
            } else {
                BACKGROUND
            };
            let on_goal = goal.is_some_and(|g| {
                let d = g.distance(&AgentState::new(x, y));
                (d - world.radius).abs() <= ring / 2.0
            });
            for (k, agent) in agents.iter().enumerate() {
                let mut colour = base;
                if agent.distance(&AgentState::new(x, y)) <= world.radius {
                    colour = AGENT;
                }
                if on_goal {
                    colour = GOAL;
                }
                let at = (py * width + k * panel + px) * 3;
                pixels[at..at + 3].copy_from_slice(&colour);
            }
        }
    }
    let mut out = format!("P6\n{width} {panel}\n255\n").into_bytes();
    out.extend_from_slice(&pixels);
    Ok(out)
}
