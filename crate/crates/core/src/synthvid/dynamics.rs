/// Closed interval applied to both coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Bounds {
    pub lo: f64,
    pub hi: f64,
}

impl Bounds {
    pub fn new(lo: f64, hi: f64) -> Self {
        assert!(lo < hi, "empty bounds [{lo}, {hi}]");
        Self { lo, hi }
    }

    pub fn contains(&self, p: [f64; 2]) -> bool {
        p.iter().all(|&c| c >= self.lo && c <= self.hi)
    }
}

/// One constant-velocity step with mirror reflection at the bounds.
///
/// Each coordinate that leaves the interval is reflected about the violated
/// bound and its velocity component flips; this repeats until the position is
/// inside, so steps longer than the interval still land correctly.
pub fn step_dynamics(pos: [f64; 2], vel: [f64; 2], bounds: Bounds) -> ([f64; 2], [f64; 2]) {
    let mut p = [pos[0] + vel[0], pos[1] + vel[1]];
    let mut v = vel;
    for axis in 0..2 {
        loop {
            if p[axis] > bounds.hi {
                p[axis] = 2.0 * bounds.hi - p[axis];
            } else if p[axis] < bounds.lo {
                p[axis] = 2.0 * bounds.lo - p[axis];
            } else {
                break;
            }
            v[axis] = -v[axis];
        }
    }
    (p, v)
}

/// Rolls `steps` positions starting at (and including) `pos`.
pub fn trajectory(pos: [f64; 2], vel: [f64; 2], bounds: Bounds, steps: usize) -> (Vec<[f64; 2]>, Vec<[f64; 2]>) {
    let mut positions = Vec::with_capacity(steps);
    let mut velocities = Vec::with_capacity(steps);
    let (mut p, mut v) = (pos, vel);
    for i in 0..steps {
        if i > 0 {
            (p, v) = step_dynamics(p, v, bounds);
        }
        positions.push(p);
        velocities.push(v);
    }
    (positions, velocities)
}
