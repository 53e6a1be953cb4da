//! Network geometry on a square torus window.
//!
//! Base stations form a Poisson point process conditioned on having at least
//! two points. Every base station serves exactly `k_users` users, drawn by
//! joint rejection sampling so that "serving base station" and "nearest base
//! station" are the same thing by construction. All pairwise displacements
//! wrap around the window edges (torus metric), which removes boundary
//! artifacts and makes every cell statistically equivalent.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson};

use crate::error::{Error, Result};

/// Lower clamp on any link distance, in kilometres (one metre). Matches the
/// near-field floor of the path-loss model.
pub const MIN_DISTANCE_KM: f64 = 1e-3;

/// Minimum expected number of base stations in the window. Below this the
/// wrap-around metric noticeably distorts the cell-size distribution.
const MIN_EXPECTED_BS: f64 = 50.0;

/// How many times a degenerate (fewer than two base stations) Poisson draw
/// may be retried before giving up.
const POISSON_RETRY_LIMIT: usize = 100;

/// Hard cap on user-placement rejection draws, per requested user. The
/// expected number of draws per user is proportional to the number of cells,
/// so this leaves a wide margin for the unlucky tail.
const PLACEMENT_ATTEMPT_FACTOR: usize = 50_000;

/// Window side that keeps roughly 200 base stations in view, floored at
/// 1 km so sparse deployments still get a sensible region.
pub fn default_window_side_km(lambda_per_km2: f64) -> f64 {
    (200.0 / lambda_per_km2).sqrt().max(1.0)
}

/// Shortest signed offset from `b` to `a` on a circle of circumference
/// `window`; always in `[-window / 2, window / 2]`.
fn wrap_delta(delta: f64, window: f64) -> f64 {
    delta - window * (delta / window).round()
}

fn torus_d2(a: &[f64; 2], b: &[f64; 2], window: f64) -> f64 {
    let dx = wrap_delta(a[0] - b[0], window);
    let dy = wrap_delta(a[1] - b[1], window);
    dx * dx + dy * dy
}

/// A single drop of the network: base-station and user positions plus the
/// full table of wrapped distances and angles between every user and every
/// base station.
#[derive(Debug, Clone)]
pub struct NetworkRealization {
    window_side_km: f64,
    bs_xy_km: Vec<[f64; 2]>,
    /// Flattened user positions; user `i` of cell `l` sits at `l * k_users + i`.
    ue_xy_km: Vec<[f64; 2]>,
    k_users: usize,
    typical_bs: usize,
    /// `distances_km[(u, j)]`: torus distance from user `u` to base station
    /// `j`, clamped below at [`MIN_DISTANCE_KM`].
    distances_km: Array2<f64>,
    /// `aoas[(u, j)]`: angle of user `u` as seen from base station `j`,
    /// measured from the positive x axis (array broadside), in radians.
    aoas: Array2<f64>,
}

impl NetworkRealization {
    /// Draw a network from its own seeded generator. See
    /// [`sample_network_with`] for the sampling rules.
    pub fn sample(
        lambda_per_km2: f64,
        k_users: usize,
        window_side_km: f64,
        seed: u64,
    ) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self::sample_with(lambda_per_km2, k_users, window_side_km, &mut rng)
    }

    /// Draw a network using the caller's generator.
    ///
    /// Base stations: Poisson with mean `lambda_per_km2 * window_side_km^2`
    /// (which must be at least 50), redrawn up to 100 times if fewer than
    /// two points come up. Users: uniform points accepted into the cell they
    /// land in until every cell holds exactly `k_users`.
    pub fn sample_with<R: Rng + ?Sized>(
        lambda_per_km2: f64,
        k_users: usize,
        window_side_km: f64,
        rng: &mut R,
    ) -> Result<Self> {
        if !lambda_per_km2.is_finite() || lambda_per_km2 <= 0.0 {
            return Err(Error::validation(format!(
                "base-station density must be positive and finite, got {lambda_per_km2}"
            )));
        }
        if !window_side_km.is_finite() || window_side_km <= 0.0 {
            return Err(Error::validation(format!(
                "window side must be positive and finite, got {window_side_km}"
            )));
        }
        if k_users == 0 {
            return Err(Error::validation("each cell must hold at least one user"));
        }
        let mean_bs = lambda_per_km2 * window_side_km * window_side_km;
        if mean_bs < MIN_EXPECTED_BS {
            return Err(Error::validation(format!(
                "expected base-station count {mean_bs:.1} is below {MIN_EXPECTED_BS}; \
                 enlarge the window so the torus approximation holds"
            )));
        }

        let poisson = Poisson::new(mean_bs)
            .map_err(|e| Error::validation(format!("invalid Poisson mean {mean_bs}: {e}")))?;
        let mut num_bs = 0usize;
        let mut drawn = false;
        for _ in 0..POISSON_RETRY_LIMIT {
            let draw = poisson.sample(rng);
            if draw >= 2.0 {
                num_bs = draw as usize;
                drawn = true;
                break;
            }
        }
        if !drawn {
            return Err(Error::numerical(format!(
                "Poisson deployment produced fewer than two base stations in \
                 {POISSON_RETRY_LIMIT} consecutive draws"
            )));
        }

        let w = window_side_km;
        let bs_xy_km: Vec<[f64; 2]> = (0..num_bs)
            .map(|_| [rng.random_range(0.0..w), rng.random_range(0.0..w)])
            .collect();

        let grid = NearestBsGrid::build(w, &bs_xy_km);
        let total_ues = num_bs * k_users;
        let mut remaining = vec![k_users as u32; num_bs];
        let mut ue_xy_km = vec![[0.0f64; 2]; total_ues];
        let mut unfilled = total_ues;
        let cap = PLACEMENT_ATTEMPT_FACTOR.saturating_mul(total_ues);
        let mut attempts = 0usize;
        while unfilled > 0 {
            attempts += 1;
            if attempts > cap {
                return Err(Error::numerical(format!(
                    "user placement did not fill every cell after {attempts} draws"
                )));
            }
            let p = [rng.random_range(0.0..w), rng.random_range(0.0..w)];
            let (cell, _) = grid.nearest(&p);
            if remaining[cell] > 0 {
                remaining[cell] -= 1;
                let slot = k_users - 1 - remaining[cell] as usize;
                ue_xy_km[cell * k_users + slot] = p;
                unfilled -= 1;
            }
        }

        Self::finalize(window_side_km, bs_xy_km, ue_xy_km, k_users)
    }

    /// Build a realization from explicit positions (all coordinates in
    /// `[0, window_side_km)`). User `i` of cell `l` must sit at flat index
    /// `l * k_users + i` and must genuinely be nearest to base station `l`
    /// in the torus metric; otherwise this fails validation. The minimum
    /// base-station count is two — the density precondition of
    /// [`NetworkRealization::sample_with`] does not apply here.
    pub fn from_positions(
        window_side_km: f64,
        bs_xy_km: Vec<[f64; 2]>,
        ue_xy_km: Vec<[f64; 2]>,
        k_users: usize,
    ) -> Result<Self> {
        if !window_side_km.is_finite() || window_side_km <= 0.0 {
            return Err(Error::validation(format!(
                "window side must be positive and finite, got {window_side_km}"
            )));
        }
        if bs_xy_km.len() < 2 {
            return Err(Error::validation("need at least two base stations"));
        }
        if k_users == 0 {
            return Err(Error::validation("each cell must hold at least one user"));
        }
        if ue_xy_km.len() != bs_xy_km.len() * k_users {
            return Err(Error::validation(format!(
                "expected {} users ({} cells of {}), got {}",
                bs_xy_km.len() * k_users,
                bs_xy_km.len(),
                k_users,
                ue_xy_km.len()
            )));
        }
        for p in bs_xy_km.iter().chain(ue_xy_km.iter()) {
            if !(p[0].is_finite() && p[1].is_finite())
                || p[0] < 0.0
                || p[0] >= window_side_km
                || p[1] < 0.0
                || p[1] >= window_side_km
            {
                return Err(Error::validation(format!(
                    "position ({}, {}) lies outside the window [0, {window_side_km})",
                    p[0], p[1]
                )));
            }
        }

        let built = Self::finalize(window_side_km, bs_xy_km, ue_xy_km, k_users)?;
        // Serving must mean nearest; allow exact ties so symmetric synthetic
        // layouts remain expressible.
        for u in 0..built.ue_xy_km.len() {
            let serving = u / k_users;
            let d_serving = built.distances_km[(u, serving)];
            for j in 0..built.bs_xy_km.len() {
                if built.distances_km[(u, j)] < d_serving * (1.0 - 1e-12) {
                    return Err(Error::validation(format!(
                        "user {} is assigned to base station {} but is nearer \
                         to base station {}",
                        u, serving, j
                    )));
                }
            }
        }
        Ok(built)
    }

    fn finalize(
        window_side_km: f64,
        bs_xy_km: Vec<[f64; 2]>,
        ue_xy_km: Vec<[f64; 2]>,
        k_users: usize,
    ) -> Result<Self> {
        let num_bs = bs_xy_km.len();
        let total_ues = ue_xy_km.len();
        let mut distances_km = Array2::zeros((total_ues, num_bs));
        let mut aoas = Array2::zeros((total_ues, num_bs));
        for (u, pu) in ue_xy_km.iter().enumerate() {
            for (j, pb) in bs_xy_km.iter().enumerate() {
                let dx = wrap_delta(pu[0] - pb[0], window_side_km);
                let dy = wrap_delta(pu[1] - pb[1], window_side_km);
                distances_km[(u, j)] = dx.hypot(dy).max(MIN_DISTANCE_KM);
                aoas[(u, j)] = dy.atan2(dx);
            }
        }

        let center = [window_side_km / 2.0, window_side_km / 2.0];
        let typical_bs = bs_xy_km
            .iter()
            .enumerate()
            .min_by(|(_, a), (_, b)| {
                torus_d2(a, &center, window_side_km)
                    .total_cmp(&torus_d2(b, &center, window_side_km))
            })
            .map(|(j, _)| j)
            .expect("at least two base stations");

        Ok(Self {
            window_side_km,
            bs_xy_km,
            ue_xy_km,
            k_users,
            typical_bs,
            distances_km,
            aoas,
        })
    }

    pub fn window_side_km(&self) -> f64 {
        self.window_side_km
    }

    pub fn num_bs(&self) -> usize {
        self.bs_xy_km.len()
    }

    pub fn k_users(&self) -> usize {
        self.k_users
    }

    pub fn num_ues(&self) -> usize {
        self.ue_xy_km.len()
    }

    /// The base station nearest the window center; its cell is the one all
    /// per-cell statistics are reported for.
    pub fn typical_bs(&self) -> usize {
        self.typical_bs
    }

    pub fn bs_position_km(&self, j: usize) -> [f64; 2] {
        self.bs_xy_km[j]
    }

    pub fn ue_position_km(&self, l: usize, i: usize) -> [f64; 2] {
        self.ue_xy_km[self.ue_index(l, i)]
    }

    /// Flat index of user `i` of cell `l`.
    pub fn ue_index(&self, l: usize, i: usize) -> usize {
        debug_assert!(i < self.k_users);
        l * self.k_users + i
    }

    /// Torus distance (km, clamped at [`MIN_DISTANCE_KM`]) from user `i` of
    /// cell `l` to base station `j`.
    pub fn distance_km(&self, l: usize, i: usize, j: usize) -> f64 {
        self.distances_km[(self.ue_index(l, i), j)]
    }

    /// Angle of user `i` of cell `l` as seen from base station `j`, in
    /// radians from broadside.
    pub fn aoa(&self, l: usize, i: usize, j: usize) -> f64 {
        self.aoas[(self.ue_index(l, i), j)]
    }

    /// Distance from a user to its own serving base station.
    pub fn serving_distance_km(&self, l: usize, i: usize) -> f64 {
        self.distance_km(l, i, l)
    }

    /// Full `(num_ues, num_bs)` distance table.
    pub fn distances(&self) -> &Array2<f64> {
        &self.distances_km
    }

    /// Full `(num_ues, num_bs)` angle table.
    pub fn aoas(&self) -> &Array2<f64> {
        &self.aoas
    }

    /// Dump the layout as CSV: one row per base station, then one row per
    /// user with its serving cell.
    pub fn write_layout_csv<W: std::io::Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "# window_side_km={}", self.window_side_km)?;
        writeln!(out, "# k_users={}", self.k_users)?;
        writeln!(out, "# typical_bs={}", self.typical_bs)?;
        writeln!(out, "kind,id,serving_bs,x_km,y_km")?;
        for (j, p) in self.bs_xy_km.iter().enumerate() {
            writeln!(out, "bs,{j},,{:.9},{:.9}", p[0], p[1])?;
        }
        for (u, p) in self.ue_xy_km.iter().enumerate() {
            writeln!(out, "ue,{u},{},{:.9},{:.9}", u / self.k_users, p[0], p[1])?;
        }
        Ok(())
    }
}

/// Uniform bucket grid over the torus for nearest-base-station queries.
/// Buckets are scanned in expanding Chebyshev rings; the search stops once
/// the best hit is provably closer than anything an unvisited ring could
/// hold.
struct NearestBsGrid<'a> {
    window: f64,
    n: usize,
    cell: f64,
    buckets: Vec<Vec<u32>>,
    bs: &'a [[f64; 2]],
}

impl<'a> NearestBsGrid<'a> {
    fn build(window: f64, bs: &'a [[f64; 2]]) -> Self {
        let n = ((bs.len() as f64).sqrt().floor() as usize).max(1);
        let cell = window / n as f64;
        let mut buckets = vec![Vec::new(); n * n];
        for (i, p) in bs.iter().enumerate() {
            let (bx, by) = Self::bucket_of(p, cell, n);
            buckets[by * n + bx].push(i as u32);
        }
        Self {
            window,
            n,
            cell,
            buckets,
            bs,
        }
    }

    fn bucket_of(p: &[f64; 2], cell: f64, n: usize) -> (usize, usize) {
        let bx = ((p[0] / cell) as usize).min(n - 1);
        let by = ((p[1] / cell) as usize).min(n - 1);
        (bx, by)
    }

    fn scan_bucket(&self, bx: usize, by: usize, p: &[f64; 2], best: &mut (usize, f64)) {
        for &i in &self.buckets[by * self.n + bx] {
            let d2 = torus_d2(p, &self.bs[i as usize], self.window);
            if d2 < best.1 {
                *best = (i as usize, d2);
            }
        }
    }

    /// Index of the nearest base station and the squared torus distance.
    fn nearest(&self, p: &[f64; 2]) -> (usize, f64) {
        let (bx, by) = Self::bucket_of(p, self.cell, self.n);
        let mut best = (usize::MAX, f64::INFINITY);
        for ring in 0..=self.n {
            if ring >= 1 {
                // Anything not yet visited is at least `ring - 1` full
                // buckets away along some axis.
                let reach = (ring - 1) as f64 * self.cell;
                if best.1 <= reach * reach {
                    break;
                }
            }
            if 2 * ring + 1 >= self.n {
                // The ring would wrap onto itself; scan whatever is left.
                for y in 0..self.n {
                    for x in 0..self.n {
                        self.scan_bucket(x, y, p, &mut best);
                    }
                }
                break;
            }
            if ring == 0 {
                self.scan_bucket(bx, by, p, &mut best);
                continue;
            }
            let r = ring as isize;
            let wrap = |i: isize| i.rem_euclid(self.n as isize) as usize;
            for dx in -r..=r {
                for dy in [-r, r] {
                    self.scan_bucket(wrap(bx as isize + dx), wrap(by as isize + dy), p, &mut best);
                }
            }
            for dy in -(r - 1)..=(r - 1) {
                for dx in [-r, r] {
                    self.scan_bucket(wrap(bx as isize + dx), wrap(by as isize + dy), p, &mut best);
                }
            }
        }
        best
    }
}
