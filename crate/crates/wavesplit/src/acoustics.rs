//! Free-field acoustics: geometry, Green's function, pressure synthesis,
//! and SNR-calibrated measurement noise.

use std::fmt::Write as _;
use std::path::Path;

use num_complex::Complex;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

use crate::scalar::{Point3, Scalar};

/// Default speed of sound in air, m/s. Configurable wherever it appears.
pub const SPEED_OF_SOUND: f64 = 343.0;

/// Default radius of the source region Omega_S, meters.
pub const SOURCE_REGION_RADIUS: f64 = 0.8;

/// Points within this distance are treated as coincident (singular).
pub const SINGULARITY_EPS: f64 = 1e-12;

/// Complex pressures at the M microphones for one wavenumber.
pub type PressureVector<T> = Vec<Complex<T>>;

#[derive(Debug, Error)]
pub enum AcousticsError {
    #[error("green: source and receiver coincide (d < {SINGULARITY_EPS})")]
    Singularity,
    #[error("add_noise: all-zero signal has undefined SNR")]
    ZeroSignal,
    #[error("mic array: {0}")]
    BadArray(String),
    #[error("mic array file, line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Frequency plus medium, carrying k = 2*pi*f/c.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Wavenumber<T> {
    pub frequency_hz: T,
    pub speed_of_sound: T,
    pub k: T,
}

impl<T: Scalar> Wavenumber<T> {
    pub fn new(frequency_hz: T, speed_of_sound: T) -> Self {
        assert!(frequency_hz >= T::zero(), "frequency must be non-negative");
        let two_pi = T::real(std::f64::consts::TAU);
        Wavenumber {
            frequency_hz,
            speed_of_sound,
            k: two_pi * frequency_hz / speed_of_sound,
        }
    }

    pub fn from_frequency(frequency_hz: T) -> Self {
        Self::new(frequency_hz, T::real(SPEED_OF_SOUND))
    }
}

/// A point source: position in meters plus complex amplitude.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PointSource<T> {
    pub position: Point3<T>,
    pub amplitude: Complex<T>,
}

/// Microphone positions on a sphere of the stated radius.
#[derive(Debug, Clone)]
pub struct MicArray<T> {
    pub positions: Vec<Point3<T>>,
    pub radius: T,
}

impl<T: Scalar> MicArray<T> {
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    fn validate(positions: &[Point3<f64>], radius: f64) -> Result<(), AcousticsError> {
        if positions.is_empty() {
            return Err(AcousticsError::BadArray("empty array".into()));
        }
        for (i, p) in positions.iter().enumerate() {
            let r = p.norm();
            if ((r - radius) / radius).abs() > 1e-9 {
                return Err(AcousticsError::BadArray(format!(
                    "mic {i} is off-sphere: norm {r}, radius {radius}"
                )));
            }
        }
        for i in 0..positions.len() {
            for j in (i + 1)..positions.len() {
                if positions[i].dist(&positions[j]) < SINGULARITY_EPS {
                    return Err(AcousticsError::BadArray(format!(
                        "mics {i} and {j} coincide"
                    )));
                }
            }
        }
        Ok(())
    }

    /// Parse a plaintext array file: one `x y z` triple per line, blank
    /// lines and `#` comments allowed.
    pub fn parse(text: &str, radius: f64) -> Result<Self, AcousticsError> {
        let mut pts = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let mut it = line.split_whitespace();
            let mut coord = [0.0f64; 3];
            for c in coord.iter_mut() {
                let tok = it.next().ok_or(AcousticsError::Parse {
                    line: lineno + 1,
                    msg: "expected three coordinates".into(),
                })?;
                *c = tok.parse().map_err(|e| AcousticsError::Parse {
                    line: lineno + 1,
                    msg: format!("bad float `{tok}`: {e}"),
                })?;
            }
            if it.next().is_some() {
                return Err(AcousticsError::Parse {
                    line: lineno + 1,
                    msg: "trailing tokens after z coordinate".into(),
                });
            }
            pts.push(Point3(coord));
        }
        Self::validate(&pts, radius)?;
        Ok(MicArray {
            positions: pts.iter().map(|p| Point3::from_f64(*p)).collect(),
            radius: T::real(radius),
        })
    }

    pub fn load(path: &Path, radius: f64) -> Result<Self, AcousticsError> {
        Self::parse(&std::fs::read_to_string(path)?, radius)
    }

    pub fn save(&self, path: &Path) -> Result<(), AcousticsError> {
        let mut out = String::new();
        for p in &self.positions {
            // default Display is shortest round-trip formatting
            writeln!(
                out,
                "{} {} {}",
                p.x().to_real(),
                p.y().to_real(),
                p.z().to_real()
            )
            .expect("string write");
        }
        std::fs::write(path, out)?;
        Ok(())
    }

    /// The bundled 64-point spherical design on the unit sphere
    /// (equal-weight quadrature exact through degree 10).
    pub fn tdesign_64() -> Self {
        Self::parse(include_str!("../assets/tdesign_64.txt"), 1.0)
            .expect("bundled array is valid")
    }

    /// Golden-angle spiral placement; fallback generator for arbitrary M.
    pub fn fibonacci_sphere(m: usize, radius: f64) -> Self {
        assert!(m >= 4, "fibonacci_sphere needs M >= 4");
        let golden = std::f64::consts::PI * (3.0 - 5f64.sqrt());
        let mut pts = Vec::with_capacity(m);
        for i in 0..m {
            let z = 1.0 - 2.0 * (i as f64 + 0.5) / m as f64;
            let r = (1.0 - z * z).sqrt();
            let th = golden * i as f64;
            pts.push(Point3([
                radius * r * th.cos(),
                radius * r * th.sin(),
                radius * z,
            ]));
        }
        MicArray {
            positions: pts.iter().map(|p| Point3::from_f64(*p)).collect(),
            radius: T::real(radius),
        }
    }
}

/// Three-dimensional free-field Green's function exp(-jkd)/(4 pi d).
pub fn green<T: Scalar>(
    r: &Point3<T>,
    r_prime: &Point3<T>,
    k: &Wavenumber<T>,
) -> Result<Complex<T>, AcousticsError> {
    let d = r.dist(r_prime);
    if d.to_real() < SINGULARITY_EPS {
        return Err(AcousticsError::Singularity);
    }
    let four_pi_d = T::real(4.0 * std::f64::consts::PI) * d;
    let phase = -(k.k * d);
    Ok(Complex::new(phase.cos(), phase.sin()) / four_pi_d)
}

/// Superpose point sources at the microphones.
pub fn synthesize<T: Scalar>(
    sources: &[PointSource<T>],
    mics: &MicArray<T>,
    k: &Wavenumber<T>,
) -> Result<PressureVector<T>, AcousticsError> {
    let mut p = vec![Complex::new(T::zero(), T::zero()); mics.len()];
    for src in sources {
        for (pm, rm) in p.iter_mut().zip(&mics.positions) {
            *pm = *pm + src.amplitude * green(rm, &src.position, k)?;
        }
    }
    Ok(p)
}

/// Mean signal power across the array, (1/M) sum |p_m|^2.
pub fn mean_power<T: Scalar>(p: &PressureVector<T>) -> f64 {
    p.iter().map(|c| c.norm_sqr().to_real()).sum::<f64>() / p.len() as f64
}

/// Add circularly-symmetric complex Gaussian noise at the requested SNR.
/// `snr_db = f64::INFINITY` is the no-noise sentinel.
pub fn add_noise<T: Scalar>(
    p: &PressureVector<T>,
    snr_db: f64,
    rng: &mut ChaCha8Rng,
) -> Result<PressureVector<T>, AcousticsError> {
    if snr_db.is_infinite() && snr_db > 0.0 {
        return Ok(p.clone());
    }
    let sig = mean_power(p);
    if sig <= 0.0 {
        return Err(AcousticsError::ZeroSignal);
    }
    let var = sig / 10f64.powf(snr_db / 10.0);
    let sd = (var / 2.0).sqrt(); // per real/imag component
    let mut out = Vec::with_capacity(p.len());
    for c in p {
        let nr: f64 = rng.sample(StandardNormal);
        let ni: f64 = rng.sample(StandardNormal);
        out.push(*c + Complex::new(T::real(nr * sd), T::real(ni * sd)));
    }
    Ok(out)
}

/// Uniform sample in the ball of the given radius: r = R * U^(1/3) with a
/// uniform direction. Exact and rejection-free.
pub fn sample_source_position<T: Scalar>(rng: &mut ChaCha8Rng, region_radius: f64) -> Point3<T> {
    assert!(region_radius > 0.0);
    let r = region_radius * rng.gen::<f64>().cbrt();
    // uniform direction from two angles
    let z: f64 = rng.gen_range(-1.0..1.0);
    let phi: f64 = rng.gen_range(-std::f64::consts::PI..std::f64::consts::PI);
    let s = (1.0 - z * z).sqrt();
    Point3::from_f64(Point3([r * s * phi.cos(), r * s * phi.sin(), r * z]))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed::stream_rng;

    fn kw(f: f64) -> Wavenumber<f64> {
        Wavenumber::from_frequency(f)
    }

    #[test]
    fn green_zero_wavenumber_unit_distance() {
        let g = green(&Point3::zero(), &Point3::new(1.0, 0.0, 0.0), &kw(0.0)).unwrap();
        assert!((g.re - 1.0 / (4.0 * std::f64::consts::PI)).abs() < 1e-15);
        assert_eq!(g.im, 0.0);
    }

    #[test]
    fn green_modulus_and_phase() {
        let k = kw(500.0);
        let r = Point3::new(0.1, -0.2, 0.3);
        let rp = Point3::new(-0.4, 0.5, 0.05);
        let d = r.dist(&rp);
        let g = green(&r, &rp, &k).unwrap();
        assert!((g.norm() - 1.0 / (4.0 * std::f64::consts::PI * d)).abs() < 1e-15);
        let phase = g.arg();
        let expect = -(k.k * d).rem_euclid(std::f64::consts::TAU);
        let diff = (phase - expect).rem_euclid(std::f64::consts::TAU);
        assert!(diff < 1e-10 || (std::f64::consts::TAU - diff) < 1e-10);
    }

    // Golden constant from an independent scalar evaluation of the Green's
    // function at d = 0.5, k = 2*pi*500/343 (computed with mpmath).
    #[test]
    fn green_golden_500hz() {
        let k = kw(500.0);
        let g = green(&Point3::zero(), &Point3::new(0.5, 0.0, 0.0), &k).unwrap();
        assert!((g.re - (-0.02107494546331149)).abs() < 1e-15, "re={}", g.re);
        assert!((g.im - 0.15775342336793484).abs() < 1e-15, "im={}", g.im);
    }

    #[test]
    fn green_reciprocity_and_decay() {
        let k = kw(321.0);
        let a = Point3::new(0.3, 0.1, -0.2);
        let b = Point3::new(-0.6, 0.4, 0.9);
        assert_eq!(green(&a, &b, &k).unwrap(), green(&b, &a, &k).unwrap());

        let d1 = Point3::new(0.25, 0.0, 0.0);
        let d2 = Point3::new(0.5, 0.0, 0.0);
        let g1 = green(&Point3::zero(), &d1, &k).unwrap().norm();
        let g2 = green(&Point3::zero(), &d2, &k).unwrap().norm();
        assert!((g1 - 2.0 * g2).abs() < 1e-15);
    }

    #[test]
    fn green_singularity() {
        let p = Point3::new(0.1, 0.2, 0.3);
        assert!(matches!(
            green(&p, &p, &kw(100.0)),
            Err(AcousticsError::Singularity)
        ));
    }

    #[test]
    fn synthesize_superposition_and_linearity() {
        let mics = MicArray::<f64>::fibonacci_sphere(16, 1.0);
        let k = kw(500.0);
        let s1 = PointSource {
            position: Point3::new(0.2, 0.1, -0.3),
            amplitude: Complex::new(1.0, 0.5),
        };
        let s2 = PointSource {
            position: Point3::new(-0.4, 0.3, 0.1),
            amplitude: Complex::new(-0.2, 0.8),
        };

        let empty = synthesize::<f64>(&[], &mics, &k).unwrap();
        assert!(empty.iter().all(|c| c.norm() == 0.0));

        let both = synthesize(&[s1, s2], &mics, &k).unwrap();
        let a = synthesize(&[s1], &mics, &k).unwrap();
        let b = synthesize(&[s2], &mics, &k).unwrap();
        for m in 0..mics.len() {
            assert!((both[m] - (a[m] + b[m])).norm() <= 1e-15 * both[m].norm().max(1.0));
        }

        let mut s1x2 = s1;
        s1x2.amplitude = s1.amplitude * 2.0;
        let doubled = synthesize(&[s1x2], &mics, &k).unwrap();
        for m in 0..mics.len() {
            assert!((doubled[m] - a[m] * 2.0).norm() < 1e-15);
        }
    }

    #[test]
    fn noise_variance_and_determinism() {
        // one source, big virtual array for a tight Monte-Carlo estimate
        let mics = MicArray::<f64>::fibonacci_sphere(10_000, 1.0);
        let k = kw(500.0);
        let src = PointSource {
            position: Point3::new(0.1, 0.0, 0.2),
            amplitude: Complex::new(1.0, 0.0),
        };
        let clean = synthesize(&[src], &mics, &k).unwrap();

        let noisy = add_noise(&clean, 40.0, &mut stream_rng(1, "n", 0)).unwrap();
        let noise_pow = clean
            .iter()
            .zip(&noisy)
            .map(|(c, n)| (n - c).norm_sqr())
            .sum::<f64>()
            / clean.len() as f64;
        let snr = 10.0 * (mean_power(&clean) / noise_pow).log10();
        assert!((snr - 40.0).abs() < 0.5, "empirical snr {snr}");

        let a = add_noise(&clean, 20.0, &mut stream_rng(9, "n", 0)).unwrap();
        let b = add_noise(&clean, 20.0, &mut stream_rng(9, "n", 0)).unwrap();
        assert_eq!(a, b);

        let clean2 = add_noise(&clean, f64::INFINITY, &mut stream_rng(1, "n", 0)).unwrap();
        assert_eq!(clean, clean2);

        let zeros = vec![Complex::new(0.0, 0.0); 8];
        assert!(matches!(
            add_noise(&zeros, 20.0, &mut stream_rng(1, "n", 0)),
            Err(AcousticsError::ZeroSignal)
        ));
    }

    #[test]
    fn ball_sampling_statistics() {
        let mut rng = stream_rng(42, "ball", 0);
        let n = 100_000;
        let mut inner = 0usize;
        let mut mean = [0.0f64; 3];
        for _ in 0..n {
            let p: Point3<f64> = sample_source_position(&mut rng, 0.8);
            assert!(p.norm() < 0.8);
            if p.norm() < 0.4 {
                inner += 1;
            }
            for a in 0..3 {
                mean[a] += p.0[a];
            }
        }
        let frac = inner as f64 / n as f64;
        assert!((frac - 0.125).abs() < 0.01, "frac {frac}");
        for m in mean {
            assert!((m / n as f64).abs() < 0.01);
        }
    }

    #[test]
    fn tdesign_and_fibonacci_arrays() {
        let td = MicArray::<f64>::tdesign_64();
        assert_eq!(td.len(), 64);
        assert_eq!(td.radius, 1.0);

        let fib = MicArray::<f64>::fibonacci_sphere(4, 1.0);
        assert_eq!(fib.len(), 4);
        for p in &fib.positions {
            assert!((p.norm() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn mic_file_round_trip_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("mics.txt");
        let td = MicArray::<f64>::tdesign_64();
        td.save(&path).unwrap();
        let back = MicArray::<f64>::load(&path, 1.0).unwrap();
        assert_eq!(td.positions, back.positions);

        assert!(matches!(
            MicArray::<f64>::parse("0 0", 1.0),
            Err(AcousticsError::Parse { .. })
        ));
        assert!(matches!(
            MicArray::<f64>::parse("0 0 0.5", 1.0),
            Err(AcousticsError::BadArray(_))
        ));
        // comments and blank lines tolerated
        let ok = MicArray::<f64>::parse("# comment\n\n1 0 0\n0 1 0\n", 1.0).unwrap();
        assert_eq!(ok.len(), 2);
    }
}
