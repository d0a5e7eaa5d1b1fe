//! Load / PV multiplier series and the generators behind the bundled
//! 24-hour profiles.
//!
//! Profile files are CSV with the exact header `time_s,load_mult,pv_mult`
//! and a fixed time step. The bundled files are synthesized: a smooth
//! diurnal load shape with an evening peak, a solar bell for PV, and for
//! cloudy conditions seeded multiplicative dips of 30 s to 5 min.

use std::fmt;
use std::path::Path;

use crate::prng::SplitMix64;

#[derive(Debug)]
pub enum ProfileError {
    Io(std::io::Error),
    MissingColumns(String),
    BadRow { line: usize, msg: String },
    RaggedSeries { line: usize },
    NegativeMultiplier { line: usize },
    BadStep(String),
    Empty,
}

impl fmt::Display for ProfileError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ProfileError::Io(e) => write!(f, "io error: {e}"),
            ProfileError::MissingColumns(h) => {
                write!(f, "expected header time_s,load_mult,pv_mult, got {h:?}")
            }
            ProfileError::BadRow { line, msg } => write!(f, "line {line}: {msg}"),
            ProfileError::RaggedSeries { line } => write!(f, "line {line}: wrong field count"),
            ProfileError::NegativeMultiplier { line } => {
                write!(f, "line {line}: negative multiplier")
            }
            ProfileError::BadStep(m) => write!(f, "irregular time step: {m}"),
            ProfileError::Empty => write!(f, "no samples"),
        }
    }
}

impl std::error::Error for ProfileError {}

impl From<std::io::Error> for ProfileError {
    fn from(e: std::io::Error) -> Self {
        ProfileError::Io(e)
    }
}

/// Load and PV multiplier series on a fixed step.
#[derive(Debug, Clone)]
pub struct ProfileSet {
    pub step_s: f64,
    pub load_mult: Vec<f64>,
    pub pv_mult: Vec<f64>,
}

impl ProfileSet {
    pub fn len(&self) -> usize {
        self.load_mult.len()
    }

    pub fn is_empty(&self) -> bool {
        self.load_mult.is_empty()
    }

    pub fn time_s(&self, i: usize) -> f64 {
        i as f64 * self.step_s
    }

    /// Constant multipliers over a duration (used by toy scenarios).
    pub fn constant(load: f64, pv: f64, step_s: f64, duration_s: f64) -> ProfileSet {
        let n = (duration_s / step_s).round() as usize;
        ProfileSet {
            step_s,
            load_mult: vec![load; n],
            pv_mult: vec![pv; n],
        }
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("time_s,load_mult,pv_mult\n");
        for i in 0..self.len() {
            out.push_str(&format!(
                "{},{:.6},{:.6}\n",
                self.time_s(i),
                self.load_mult[i],
                self.pv_mult[i]
            ));
        }
        out
    }
}

pub fn load_profiles(path: impl AsRef<Path>) -> Result<ProfileSet, ProfileError> {
    let text = std::fs::read_to_string(path.as_ref())?;
    parse_profiles(&text)
}

pub fn parse_profiles(text: &str) -> Result<ProfileSet, ProfileError> {
    let mut lines = text.lines().enumerate();
    let header = loop {
        match lines.next() {
            Some((_, l)) if l.trim().is_empty() => continue,
            Some((_, l)) => break l.trim(),
            None => return Err(ProfileError::Empty),
        }
    };
    if header != "time_s,load_mult,pv_mult" {
        return Err(ProfileError::MissingColumns(header.to_string()));
    }
    let mut times = Vec::new();
    let mut load = Vec::new();
    let mut pv = Vec::new();
    for (i, raw) in lines {
        let line = i + 1;
        let row = raw.trim();
        if row.is_empty() {
            continue;
        }
        let fields: Vec<&str> = row.split(',').collect();
        if fields.len() != 3 {
            return Err(ProfileError::RaggedSeries { line });
        }
        let parse = |s: &str| -> Result<f64, ProfileError> {
            s.trim().parse::<f64>().map_err(|e| ProfileError::BadRow {
                line,
                msg: format!("{s:?}: {e}"),
            })
        };
        let (t, lm, pm) = (parse(fields[0])?, parse(fields[1])?, parse(fields[2])?);
        if lm < 0.0 || pm < 0.0 {
            return Err(ProfileError::NegativeMultiplier { line });
        }
        times.push(t);
        load.push(lm);
        pv.push(pm);
    }
    if times.is_empty() {
        return Err(ProfileError::Empty);
    }
    let step_s = if times.len() > 1 {
        times[1] - times[0]
    } else {
        1.0
    };
    if step_s <= 0.0 {
        return Err(ProfileError::BadStep("non-increasing time".into()));
    }
    for w in times.windows(2) {
        if ((w[1] - w[0]) - step_s).abs() > 1e-6 {
            return Err(ProfileError::BadStep(format!(
                "step changes from {step_s} to {}",
                w[1] - w[0]
            )));
        }
    }
    Ok(ProfileSet {
        step_s,
        load_mult: load,
        pv_mult: pv,
    })
}

/// The four bundled 24-hour operating conditions.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProfileKind {
    HighCloudy,
    HighSunny,
    LightCloudy,
    LightSunny,
}

impl ProfileKind {
    pub const ALL: [ProfileKind; 4] = [
        ProfileKind::HighCloudy,
        ProfileKind::HighSunny,
        ProfileKind::LightCloudy,
        ProfileKind::LightSunny,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ProfileKind::HighCloudy => "high_cloudy",
            ProfileKind::HighSunny => "high_sunny",
            ProfileKind::LightCloudy => "light_cloudy",
            ProfileKind::LightSunny => "light_sunny",
        }
    }

    pub fn from_name(s: &str) -> Option<ProfileKind> {
        ProfileKind::ALL.into_iter().find(|k| k.name() == s)
    }

    fn high_load(self) -> bool {
        matches!(self, ProfileKind::HighCloudy | ProfileKind::HighSunny)
    }

    fn cloudy(self) -> bool {
        matches!(self, ProfileKind::HighCloudy | ProfileKind::LightCloudy)
    }
}

/// Diurnal load shape in [0, 1] before scaling. The heavy-load day follows a
/// summer pattern: a broad afternoon peak overlapping solar production and a
/// shorter shoulder after sunset. The light-load day is winter-like with
/// morning and evening bumps.
fn load_shape(kind: ProfileKind, t_h: f64) -> f64 {
    let bump = |c: f64, w: f64| (-((t_h - c) / w).powi(2)).exp();
    let base = 0.5 - 0.5 * ((t_h - 4.0) / 24.0 * 2.0 * std::f64::consts::PI).cos();
    if kind.high_load() {
        0.42 * base + 0.30 * bump(14.0, 4.5) + bump(19.5, 0.75)
    } else {
        0.40 * base + 0.45 * bump(7.6, 1.6) + bump(18.6, 2.0)
    }
}

/// Clear-sky bell: zero outside roughly 06:10-19:50, peak 1.0 at 13:00.
fn pv_bell(t_h: f64) -> f64 {
    let half_width = 7.1;
    let x = (t_h - 13.0) / half_width;
    if x.abs() >= 1.0 {
        0.0
    } else {
        (std::f64::consts::FRAC_PI_2 * x).cos().powf(1.15)
    }
}

/// Synthesize a 24-hour profile at the given step. Cloud dips are seeded
/// and reproducible: depth 15-40%, one to five minutes long, with edges
/// smoothed over roughly a minute.
pub fn synthesize(kind: ProfileKind, step_s: f64, seed: u64) -> ProfileSet {
    let n = (86_400.0 / step_s).round() as usize;
    let (trough, peak) = if kind.high_load() {
        (0.25, 0.67)
    } else {
        (0.21, 0.34)
    };
    let shape_max = (0..n)
        .map(|i| load_shape(kind, i as f64 * step_s / 3600.0))
        .fold(f64::MIN, f64::max);

    let mut rng = SplitMix64::new(seed ^ 0x5eed_0001);
    let mut load_mult = Vec::with_capacity(n);
    let mut dip_factor = vec![1.0; n];
    let mut dip_left = 0usize;
    let mut dip_depth = 0.0;
    for (i, f) in dip_factor.iter_mut().enumerate() {
        let t_h = i as f64 * step_s / 3600.0;
        let s = load_shape(kind, t_h) / shape_max;
        load_mult.push(trough + (peak - trough) * s);
        if kind.cloudy() && pv_bell(t_h) > 0.0 {
            // summer convective clouds cut deeper and last longer than
            // winter stratus passages
            let (lo, hi, max_s) = if kind.high_load() {
                (0.15, 0.40, 300.0)
            } else {
                (0.10, 0.26, 150.0)
            };
            if dip_left == 0 && rng.next_f64() < 0.02 {
                dip_depth = rng.range(lo, hi);
                dip_left = 4 + rng.below((max_s / step_s) as u64) as usize;
            }
            if dip_left > 0 {
                dip_left -= 1;
                *f = 1.0 - dip_depth;
            }
        }
    }
    // cloud fronts sweep the fleet over tens of seconds, not instantly
    let mut smoothed = dip_factor.clone();
    for _ in 0..6 {
        smoothed = smooth3(&smoothed);
    }
    // winter sun peaks lower
    let season = if kind.high_load() { 1.0 } else { 0.88 };
    let pv_mult = (0..n)
        .map(|i| season * pv_bell(i as f64 * step_s / 3600.0) * smoothed[i])
        .collect();
    ProfileSet {
        step_s,
        load_mult,
        pv_mult,
    }
}

fn smooth3(x: &[f64]) -> Vec<f64> {
    let n = x.len();
    (0..n)
        .map(|i| {
            let a = x[i.saturating_sub(1)];
            let b = x[i];
            let c = x[(i + 1).min(n - 1)];
            0.25 * a + 0.5 * b + 0.25 * c
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_constant_profile() {
        let text = "time_s,load_mult,pv_mult\n0,1.0,1.0\n15,1.0,1.0\n30,1.0,1.0\n";
        let p = parse_profiles(text).unwrap();
        assert_eq!(p.len(), 3);
        assert_eq!(p.step_s, 15.0);
        assert!(p.load_mult.iter().all(|&x| x == 1.0));
    }

    #[test]
    fn parse_rejects_bad_inputs() {
        assert!(matches!(
            parse_profiles("time,load,pv\n0,1,1\n"),
            Err(ProfileError::MissingColumns(_))
        ));
        assert!(matches!(
            parse_profiles("time_s,load_mult,pv_mult\n0,1.0\n"),
            Err(ProfileError::RaggedSeries { .. })
        ));
        assert!(matches!(
            parse_profiles("time_s,load_mult,pv_mult\n0,-0.5,1\n"),
            Err(ProfileError::NegativeMultiplier { .. })
        ));
        assert!(matches!(
            parse_profiles("time_s,load_mult,pv_mult\n0,1,1\n15,1,1\n45,1,1\n"),
            Err(ProfileError::BadStep(_))
        ));
    }

    #[test]
    fn synthesized_profiles_are_sane_and_seeded() {
        for kind in ProfileKind::ALL {
            let p = synthesize(kind, 15.0, 1);
            assert_eq!(p.len(), 5760);
            assert!(p.load_mult.iter().all(|&x| x > 0.0));
            assert!(p.pv_mult.iter().all(|&x| (0.0..=1.0).contains(&x)));
            // night has no PV
            assert_eq!(p.pv_mult[0], 0.0);
            let peak = p.pv_mult.iter().cloned().fold(0.0, f64::max);
            assert!(peak > 0.8, "{kind:?} pv peak {peak}");
        }
        let a = synthesize(ProfileKind::HighCloudy, 15.0, 7);
        let b = synthesize(ProfileKind::HighCloudy, 15.0, 7);
        assert_eq!(a.pv_mult, b.pv_mult);
        let c = synthesize(ProfileKind::HighCloudy, 15.0, 8);
        assert_ne!(a.pv_mult, c.pv_mult);
        // cloudy actually dips relative to the bell
        let sunny = synthesize(ProfileKind::HighSunny, 15.0, 7);
        let dipped = a
            .pv_mult
            .iter()
            .zip(&sunny.pv_mult)
            .filter(|(c, s)| *c < *s)
            .count();
        assert!(dipped > 200, "only {dipped} dipped samples");
    }

    #[test]
    fn csv_round_trip() {
        let p = synthesize(ProfileKind::LightSunny, 60.0, 3);
        let back = parse_profiles(&p.to_csv()).unwrap();
        assert_eq!(back.len(), p.len());
        assert_eq!(back.step_s, p.step_s);
        for i in 0..p.len() {
            assert!((back.load_mult[i] - p.load_mult[i]).abs() < 1e-6);
        }
    }
}
