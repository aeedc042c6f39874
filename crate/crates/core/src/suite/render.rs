use super::{SimState, TaskSpec};
use crate::policy::Observation;

/// RGB colour of each object.
pub const COLORS: [[f64; 3]; 6] = [
    [1.0, 0.0, 0.0],
    [0.0, 1.0, 0.0],
    [0.0, 0.0, 1.0],
    [1.0, 1.0, 0.0],
    [0.0, 1.0, 1.0],
    [1.0, 0.0, 1.0],
];

const OBJECT_SIGMA_PX: f64 = 0.8;
const TARGET_INTENSITY: f64 = 0.3;

/// Renders the scene and fills the proprio vector from the gripper state.
pub fn render(state: &SimState, spec: &TaskSpec) -> Observation {
    let colors: Vec<usize> = spec.objects.iter().map(|o| o.color).collect();
    let radii: Vec<f64> = spec.targets.iter().map(|t| t.radius).collect();
    Observation {
        image: render_image(spec.image_size, &state.objects, &colors, &state.targets, &radii),
        proprio: state.proprio(),
    }
}

/// Channel-major `3×S×S` image. Objects are Gaussian blobs in their colour,
/// target regions faint grey blobs of their radius. Contributions add and
/// saturate at 1. Row index grows with y.
pub fn render_image(
    size: usize,
    objects: &[[f64; 2]],
    colors: &[usize],
    targets: &[[f64; 2]],
    target_radii: &[f64],
) -> Vec<f64> {
    let s = size as f64;
    let obj_sigma = OBJECT_SIGMA_PX / s;
    let mut image = vec![0.0; 3 * size * size];
    for py in 0..size {
        let y = (py as f64 + 0.5) / s;
        for px in 0..size {
            let x = (px as f64 + 0.5) / s;
            let blob = |c: [f64; 2], sigma: f64| {
                let d2 = (x - c[0]).powi(2) + (y - c[1]).powi(2);
                (-d2 / (2.0 * sigma * sigma)).exp()
            };
            let mut rgb = [0.0; 3];
            for (&c, &r) in targets.iter().zip(target_radii) {
                let v = TARGET_INTENSITY * blob(c, r / 1.5);
                rgb.iter_mut().for_each(|ch| *ch += v);
            }
            for (&c, &k) in objects.iter().zip(colors) {
                let v = blob(c, obj_sigma);
                for (ch, w) in rgb.iter_mut().zip(COLORS[k % COLORS.len()]) {
                    *ch += w * v;
                }
            }
            for (ch, v) in rgb.iter().enumerate() {
                image[(ch * size + py) * size + px] = v.min(1.0);
            }
        }
    }
    image
}
