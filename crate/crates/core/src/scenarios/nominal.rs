//! Kinematic nominal synthesis: a noiseless closed-loop rollout tracking a
//! Catmull–Rom path under a constant-acceleration time law.

use nalgebra::DVector;

use crate::belief::NominalTrajectory;
use crate::error::{Error, Result};
use crate::sde_models::{integrate_deterministic, ItoSystem, SafeSet};

use super::{NominalSpec, Scenario, SystemSpec};

const KP: f64 = 9.0;
const KD: f64 = 6.0;
const K_HEADING: f64 = 30.0;
const K_TURN_RATE: f64 = 10.0;
/// Dense collision sampling per control tick.
const CLEARANCE_SAMPLES: usize = 10;
const ARC_TABLE_PER_SEGMENT: usize = 512;

/// Nominal states and controls on the control grid.
///
/// `dubins`: tracks the path with thrust along the heading, steering the
/// heading toward the desired acceleration. `double_integrator_1d`: the desired
/// acceleration is the control. `zero_control` coasts. The result must keep
/// `max_j g_j < 0` at 10× the control rate.
pub fn synthesize_nominal(scenario: &Scenario, system: &dyn ItoSystem) -> Result<NominalTrajectory> {
    let ticks = scenario.num_ticks()?;
    let x0 = scenario.initial_mean();
    let m = system.control_dim();
    let tick = 1.0 / system.control_rate_hz();

    let controls = match &scenario.nominal {
        NominalSpec::ZeroControl => vec![DVector::zeros(m); ticks],
        NominalSpec::Kinematic { waypoints } => {
            let ws = system
                .workspace()
                .ok_or_else(|| Error::invalid("kinematic nominal needs a system with a workspace"))?
                .clone();
            let mut points = vec![ws.position.iter().map(|&i| x0[i]).collect::<Vec<_>>()];
            points.extend(waypoints.iter().cloned());
            points.push(scenario.goal.clone());
            let v0: Vec<f64> = ws.velocity.iter().map(|&i| x0[i]).collect();
            let reference = Reference::new(&points, &v0, scenario.horizon_s)?;
            // Heading and turn-rate indices of the Dubins state.
            let heading = matches!(scenario.system, SystemSpec::Dubins { .. }).then_some((4usize, 5usize));
            let mut x = x0.clone();
            let mut controls = Vec::with_capacity(ticks);
            for k in 0..ticks {
                let t = k as f64 * tick;
                let (r, rd, rdd) = reference.eval(t);
                let a_des: Vec<f64> = (0..ws.dim())
                    .map(|i| rdd[i] + KP * (r[i] - x[ws.position[i]]) + KD * (rd[i] - x[ws.velocity[i]]))
                    .collect();
                let u = match heading {
                    Some((th, om)) => heading_control(&a_des, x[th], x[om]),
                    None if m == ws.dim() => DVector::from_vec(a_des),
                    None => return Err(Error::invalid("no kinematic tracking law for this system")),
                };
                x = integrate_deterministic(system, t, &x, &u, tick, CLEARANCE_SAMPLES);
                controls.push(u);
            }
            controls
        }
    };

    let nominal = NominalTrajectory::from_controls(system, x0, controls)?;
    check_nominal_clearance(system, &nominal, &scenario.safe_set()?, CLEARANCE_SAMPLES)?;
    Ok(nominal)
}

/// Thrust along the heading and a PD turn toward the desired acceleration
/// direction (modulo π, so reverse thrust is allowed).
fn heading_control(a_des: &[f64], theta: f64, omega: f64) -> DVector<f64> {
    let (ax, ay) = (a_des[0], a_des[1]);
    let theta_des = if ax.hypot(ay) > 1e-9 {
        theta + wrap_half_pi(ay.atan2(ax) - theta)
    } else {
        theta
    };
    let thrust = ax * theta.cos() + ay * theta.sin();
    let alpha = K_HEADING * (theta_des - theta) - K_TURN_RATE * omega;
    DVector::from_vec(vec![thrust, alpha])
}

/// Wraps an angle into `(-π/2, π/2]`.
fn wrap_half_pi(a: f64) -> f64 {
    let half = std::f64::consts::FRAC_PI_2;
    let mut w = a.rem_euclid(std::f64::consts::PI);
    if w > half {
        w -= std::f64::consts::PI;
    }
    w
}

/// Fails with the first sample where some `g_j >= 0`, checking `samples`
/// points per control tick (plus `t = 0`).
pub fn check_nominal_clearance(
    system: &dyn ItoSystem,
    nominal: &NominalTrajectory,
    safe_set: &SafeSet,
    samples: usize,
) -> Result<()> {
    let samples = samples.max(1);
    let h = nominal.tick / samples as f64;
    let check = |x: &DVector<f64>, t: f64| -> Result<()> {
        for (j, c) in safe_set.constraints.iter().enumerate() {
            let value = c.value(x);
            if value >= 0.0 {
                return Err(Error::NominalInCollision { time: t, constraint: j, value });
            }
        }
        Ok(())
    };
    check(&nominal.states[0], 0.0)?;
    for k in 0..nominal.num_ticks() {
        let mut x = nominal.states[k].clone();
        for s in 0..samples {
            let t = nominal.tick_time(k) + s as f64 * h;
            x = integrate_deterministic(system, t, &x, &nominal.controls[k], h, 1);
            check(&x, t + h)?;
        }
    }
    Ok(())
}

/// Catmull–Rom path through `points`, traversed by arc length
/// `s(t) = s0' t + a t² / 2` with `s(T) = L`.
struct Reference {
    points: Vec<Vec<f64>>,
    /// Cumulative arc length at parameter `u = i / ARC_TABLE_PER_SEGMENT`.
    arc: Vec<f64>,
    speed0: f64,
    accel: f64,
    length: f64,
}

impl Reference {
    fn new(points: &[Vec<f64>], v0: &[f64], horizon: f64) -> Result<Self> {
        let d = v0.len();
        let mut pts: Vec<Vec<f64>> = Vec::with_capacity(points.len());
        for p in points {
            if pts.last().is_none_or(|q: &Vec<f64>| dist(q, p) > 1e-9) {
                pts.push(p.clone());
            }
        }
        if pts.len() < 2 {
            // Start equals goal: hold position.
            pts.push(pts[0].clone());
        }
        let segments = pts.len() - 1;
        let n = segments * ARC_TABLE_PER_SEGMENT;
        let mut arc = Vec::with_capacity(n + 1);
        arc.push(0.0);
        let mut this = Self { points: pts, arc: Vec::new(), speed0: 0.0, accel: 0.0, length: 0.0 };
        let du = 1.0 / ARC_TABLE_PER_SEGMENT as f64;
        for i in 1..=n {
            let u0 = (i - 1) as f64 * du;
            arc.push(arc[i - 1] + this.arc_between(u0, u0 + du));
        }
        let length = *arc.last().unwrap();
        this.arc = arc;
        this.length = length;
        if length > 0.0 {
            let (_, tangent, _) = this.spline(0.0);
            let norm = tangent.iter().map(|v| v * v).sum::<f64>().sqrt();
            let along: f64 = (0..d).map(|i| v0[i] * tangent[i] / norm).sum();
            this.speed0 = along.max(0.0);
            if this.speed0 * horizon > 2.0 * length {
                return Err(Error::invalid(format!(
                    "initial speed {:.3} overshoots a {length:.3} m path within {horizon} s; add waypoints or lower the speed",
                    this.speed0
                )));
            }
            this.accel = 2.0 * (length - this.speed0 * horizon) / (horizon * horizon);
        }
        Ok(this)
    }

    /// Position, first and second derivative in `u ∈ [0, segments]`.
    fn spline(&self, u: f64) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        let pts = &self.points;
        let segments = pts.len() - 1;
        let i = (u.floor() as usize).min(segments - 1);
        let s = u - i as f64;
        let get = |k: isize| -> Vec<f64> {
            if k < 0 {
                pts[0].iter().zip(&pts[1]).map(|(a, b)| 2.0 * a - b).collect()
            } else if k as usize > segments {
                pts[segments].iter().zip(&pts[segments - 1]).map(|(a, b)| 2.0 * a - b).collect()
            } else {
                pts[k as usize].clone()
            }
        };
        let (p0, p1, p2, p3) = (get(i as isize - 1), get(i as isize), get(i as isize + 1), get(i as isize + 2));
        let d = p1.len();
        let mut pos = vec![0.0; d];
        let mut vel = vec![0.0; d];
        let mut acc = vec![0.0; d];
        for k in 0..d {
            let a = 2.0 * p1[k];
            let b = p2[k] - p0[k];
            let c = 2.0 * p0[k] - 5.0 * p1[k] + 4.0 * p2[k] - p3[k];
            let e = -p0[k] + 3.0 * p1[k] - 3.0 * p2[k] + p3[k];
            pos[k] = 0.5 * (a + b * s + c * s * s + e * s * s * s);
            vel[k] = 0.5 * (b + 2.0 * c * s + 3.0 * e * s * s);
            acc[k] = 0.5 * (2.0 * c + 6.0 * e * s);
        }
        (pos, vel, acc)
    }

    /// Spline parameter at arc length `s`.
    fn param_at(&self, s: f64) -> f64 {
        let s = s.clamp(0.0, self.length);
        let i = self.arc.partition_point(|&a| a < s).clamp(1, self.arc.len() - 1);
        let (a0, a1) = (self.arc[i - 1], self.arc[i]);
        let frac = if a1 > a0 { (s - a0) / (a1 - a0) } else { 0.0 };
        let u0 = (i - 1) as f64 / ARC_TABLE_PER_SEGMENT as f64;
        let u1 = i as f64 / ARC_TABLE_PER_SEGMENT as f64;
        let mut u = u0 + frac * (u1 - u0);
        for _ in 0..3 {
            let speed = self.speed_u(u);
            if speed < 1e-12 {
                break;
            }
            u = (u - (a0 + self.arc_between(u0, u) - s) / speed).clamp(u0, u1);
        }
        u
    }

    fn speed_u(&self, u: f64) -> f64 {
        self.spline(u).1.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Simpson's rule for the arc length over `[u0, u1]`.
    fn arc_between(&self, u0: f64, u1: f64) -> f64 {
        let mid = 0.5 * (u0 + u1);
        (u1 - u0) / 6.0 * (self.speed_u(u0) + 4.0 * self.speed_u(mid) + self.speed_u(u1))
    }

    /// Reference position, velocity and acceleration at time `t`.
    fn eval(&self, t: f64) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        let s = self.speed0 * t + 0.5 * self.accel * t * t;
        let s_dot = self.speed0 + self.accel * t;
        let u = self.param_at(s);
        let (p, dp, ddp) = self.spline(u);
        if self.length == 0.0 {
            return (p, vec![0.0; dp.len()], vec![0.0; dp.len()]);
        }
        let speed_u = dp.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
        let u_dot = s_dot / speed_u;
        let dp_ddp: f64 = dp.iter().zip(&ddp).map(|(a, b)| a * b).sum();
        let u_ddot = self.accel / speed_u - s_dot * dp_ddp / speed_u.powi(3) * u_dot;
        let vel = dp.iter().map(|v| v * u_dot).collect();
        let acc = dp.iter().zip(&ddp).map(|(a, b)| b * u_dot * u_dot + a * u_ddot).collect();
        (p, vel, acc)
    }
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}
