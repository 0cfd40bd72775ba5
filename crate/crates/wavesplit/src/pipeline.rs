//! Two-stage inference: separate a mixture, localize each separated
//! source, recover complex amplitudes against the original observation,
//! and reconstruct the field anywhere in the region.

use num_complex::Complex;
use thiserror::Error;

use crate::acoustics::{green, MicArray, PointSource, PressureVector, Wavenumber};
use crate::engine::EngineError;
use crate::linalg::lstsq;
use crate::models::net::{SfsNet, SslNet};
use crate::models::pack::{pack_sfs_input, pack_ssl_input, unpack_sfs_output, PackError};
use crate::models::Network;
use crate::scalar::{Point3, Scalar};

/// Two estimated positions closer than this collapse the amplitude
/// system; the pipeline falls back to a single midpoint source.
pub const COINCIDENT_EPS: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("unsupported source count {0} (expected 1 or 2)")]
    UnsupportedS(usize),
    #[error("separator weights are required for S = 2")]
    MissingSeparator,
    #[error("degenerate geometry: estimated positions are coincident")]
    DegenerateGeometry,
    #[error("evaluation point within {COINCIDENT_EPS} m of a source")]
    SingularPoint,
    #[error(transparent)]
    Pack(#[from] PackError),
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error(transparent)]
    Acoustics(#[from] crate::acoustics::AcousticsError),
}

/// Estimated sources plus the separated per-source pressures they came
/// from. `degenerate` marks a coincident-position fallback.
#[derive(Debug, Clone)]
pub struct Decomposition<T> {
    pub sources: Vec<PointSource<T>>,
    pub separated: Vec<PressureVector<T>>,
    pub degenerate: bool,
}

/// Localize one single-source pressure vector with the localizer net.
pub fn localize_single<T: Scalar>(
    u: &PressureVector<T>,
    ssl: &SslNet<T>,
) -> Result<Point3<T>, PipelineError> {
    let x = pack_ssl_input(u)?;
    let m = u.len();
    let batched = x.reshape(&[1, 2, m, m]);
    let y = ssl.forward(&batched)?;
    assert_eq!(y.shape(), &[1, 3]);
    Ok(Point3([y.data()[0], y.data()[1], y.data()[2]]))
}

/// Complex source amplitudes given the observed pressures and estimated
/// positions. S = 1 uses the centered least-squares regression; S > 1 the
/// pseudo-inverse of the Green's matrix.
pub fn estimate_amplitudes<T: Scalar>(
    p: &PressureVector<T>,
    positions: &[Point3<T>],
    mics: &MicArray<T>,
    k: &Wavenumber<T>,
) -> Result<Vec<Complex<T>>, PipelineError> {
    let m = mics.len();
    let s = positions.len();
    assert!(s >= 1 && m >= s);
    assert_eq!(p.len(), m);
    for i in 0..s {
        for j in i + 1..s {
            if positions[i].dist(&positions[j]).to_real() < COINCIDENT_EPS {
                return Err(PipelineError::DegenerateGeometry);
            }
        }
    }
    if s == 1 {
        let g: Vec<Complex<T>> = mics
            .positions
            .iter()
            .map(|rm| green(rm, &positions[0], k))
            .collect::<Result<_, _>>()?;
        let inv_m = T::real(1.0 / m as f64);
        let mu_u = p.iter().fold(Complex::new(T::zero(), T::zero()), |a, b| a + b) * inv_m;
        let mu_g = g.iter().fold(Complex::new(T::zero(), T::zero()), |a, b| a + b) * inv_m;
        let mut num = Complex::new(T::zero(), T::zero());
        let mut den = T::zero();
        for (um, gm) in p.iter().zip(&g) {
            let gc = gm - mu_g;
            num = num + (um - mu_u) * gc.conj();
            den = den + gc.norm_sqr();
        }
        if den.to_real() <= 0.0 {
            return Err(PipelineError::DegenerateGeometry);
        }
        return Ok(vec![num / den]);
    }
    let mut a = vec![Complex::new(T::zero(), T::zero()); m * s];
    for (r, rm) in mics.positions.iter().enumerate() {
        for (c, pos) in positions.iter().enumerate() {
            a[r * s + c] = green(rm, pos, k)?;
        }
    }
    lstsq(&a, p, m, s).ok_or(PipelineError::DegenerateGeometry)
}

/// Full two-stage decomposition of an observed mixture.
pub fn decompose<T: Scalar>(
    p: &PressureVector<T>,
    s: usize,
    sfs: Option<&SfsNet<T>>,
    ssl: &SslNet<T>,
    mics: &MicArray<T>,
    k: &Wavenumber<T>,
) -> Result<Decomposition<T>, PipelineError> {
    match s {
        1 => {
            let pos = localize_single(p, ssl)?;
            let amps = estimate_amplitudes(p, &[pos], mics, k)?;
            Ok(Decomposition {
                sources: vec![PointSource {
                    position: pos,
                    amplitude: amps[0],
                }],
                separated: vec![p.clone()],
                degenerate: false,
            })
        }
        2 => {
            let sfs = sfs.ok_or(PipelineError::MissingSeparator)?;
            let m = p.len();
            let (x, scale) = pack_sfs_input(p)?;
            let y = sfs.forward(&x.reshape(&[1, 2, m]))?;
            let separated = unpack_sfs_output(&y.reshape(&[4, m]), scale)?;
            decompose_separated(p, &separated, ssl, mics, k)
        }
        other => Err(PipelineError::UnsupportedS(other)),
    }
}

/// Second half of the two-source pipeline, starting from per-source
/// pressures (the separator's output, or oracle pressures in tests).
pub fn decompose_separated<T: Scalar>(
    p: &PressureVector<T>,
    separated: &[PressureVector<T>],
    ssl: &SslNet<T>,
    mics: &MicArray<T>,
    k: &Wavenumber<T>,
) -> Result<Decomposition<T>, PipelineError> {
    let mut positions = Vec::with_capacity(separated.len());
    for u in separated {
        positions.push(localize_single(u, ssl)?);
    }
    let (sources, degenerate) = sources_from_positions(p, &positions, mics, k)?;
    Ok(Decomposition {
        sources,
        separated: separated.to_vec(),
        degenerate,
    })
}

/// Amplitude recovery for already-estimated positions, with the
/// coincident-pair midpoint fallback. Returns the sources and whether
/// the fallback fired.
pub fn sources_from_positions<T: Scalar>(
    p: &PressureVector<T>,
    positions: &[Point3<T>],
    mics: &MicArray<T>,
    k: &Wavenumber<T>,
) -> Result<(Vec<PointSource<T>>, bool), PipelineError> {
    let coincident = positions.len() == 2
        && positions[0].dist(&positions[1]).to_real() < COINCIDENT_EPS;
    if coincident {
        // collapse to one source at the midpoint and flag the result
        let mid = positions[0].add(&positions[1]).scale(T::real(0.5));
        let amps = estimate_amplitudes(p, &[mid], mics, k)?;
        return Ok((
            vec![PointSource {
                position: mid,
                amplitude: amps[0],
            }],
            true,
        ));
    }
    let amps = estimate_amplitudes(p, positions, mics, k)?;
    Ok((
        positions
            .iter()
            .zip(amps)
            .map(|(&position, amplitude)| PointSource {
                position,
                amplitude,
            })
            .collect(),
        false,
    ))
}

/// Field reconstruction at arbitrary points by Green's superposition.
pub fn reconstruct<T: Scalar>(
    sources: &[PointSource<T>],
    points: &[Point3<T>],
    k: &Wavenumber<T>,
) -> Result<Vec<Complex<T>>, PipelineError> {
    let mut out = Vec::with_capacity(points.len());
    for r in points {
        for src in sources {
            if r.dist(&src.position).to_real() < COINCIDENT_EPS {
                return Err(PipelineError::SingularPoint);
            }
        }
        let mut acc = Complex::new(T::zero(), T::zero());
        for src in sources {
            acc = acc + src.amplitude * green(r, &src.position, k)?;
        }
        out.push(acc);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::acoustics::synthesize;
    use crate::seed::stream_rng;
    use rand::Rng;

    fn mics() -> MicArray<f64> {
        MicArray::tdesign_64()
    }

    fn wavenumber() -> Wavenumber<f64> {
        Wavenumber::from_frequency(500.0)
    }

    fn ssl_net() -> SslNet<f64> {
        SslNet::build(64, 3, &[4, 8], &[16, 8], &mut stream_rng(21, "pipe", 0))
    }

    #[test]
    fn localize_single_is_phase_and_scale_invariant() {
        let mics = mics();
        let k = wavenumber();
        let ssl = ssl_net();
        let src = PointSource {
            position: Point3([0.1, -0.2, 0.3]),
            amplitude: Complex::new(0.7, -0.4),
        };
        let u = synthesize(&[src], &mics, &k).unwrap();
        let base = localize_single(&u, &ssl).unwrap();
        // power-of-two real scalings cancel exactly in the packing
        for c in [0.25, 2.0, 1024.0, -8.0] {
            let scaled: PressureVector<f64> = u.iter().map(|v| v * c).collect();
            let p = localize_single(&scaled, &ssl).unwrap();
            assert_eq!(p.0, base.0, "binary scaling must cancel bitwise");
        }
        // arbitrary complex scalings cancel up to input rounding
        let mut rng = stream_rng(21, "pipe-c", 0);
        for _ in 0..20 {
            let c = Complex::new(rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0));
            if c.norm() < 1e-3 {
                continue;
            }
            let scaled: PressureVector<f64> = u.iter().map(|v| v * c).collect();
            let p = localize_single(&scaled, &ssl).unwrap();
            assert!(p.dist(&base) < 1e-9, "covariance packing must cancel c");
        }
    }

    #[test]
    fn amplitude_recovery_is_exact_on_consistent_data() {
        let mics = mics();
        let k = wavenumber();
        // S = 1
        let a = Complex::new(-1.3, 0.8);
        let pos = Point3([0.25, 0.1, -0.4]);
        let u = synthesize(
            &[PointSource {
                position: pos,
                amplitude: a,
            }],
            &mics,
            &k,
        )
        .unwrap();
        let est = estimate_amplitudes(&u, &[pos], &mics, &k).unwrap();
        assert!((est[0] - a).norm() / a.norm() < 1e-12);

        // S = 2
        let srcs = [
            PointSource {
                position: Point3([0.3, -0.2, 0.1]),
                amplitude: Complex::new(0.9, -0.5),
            },
            PointSource {
                position: Point3([-0.4, 0.3, -0.2]),
                amplitude: Complex::new(-0.3, 1.1),
            },
        ];
        let p = synthesize(&srcs, &mics, &k).unwrap();
        let est = estimate_amplitudes(
            &p,
            &[srcs[0].position, srcs[1].position],
            &mics,
            &k,
        )
        .unwrap();
        for (e, s) in est.iter().zip(&srcs) {
            assert!((e - s.amplitude).norm() / s.amplitude.norm() < 1e-10);
        }
    }

    #[test]
    fn coincident_positions_are_degenerate() {
        let mics = mics();
        let k = wavenumber();
        let pos = Point3([0.1, 0.1, 0.1]);
        let u = synthesize(
            &[PointSource {
                position: pos,
                amplitude: Complex::new(1.0, 0.0),
            }],
            &mics,
            &k,
        )
        .unwrap();
        let err = estimate_amplitudes(&u, &[pos, pos], &mics, &k).unwrap_err();
        assert!(matches!(err, PipelineError::DegenerateGeometry));
    }

    #[test]
    fn phase_equivariance_single_source() {
        let mics = mics();
        let k = wavenumber();
        let ssl = ssl_net();
        let src = PointSource {
            position: Point3([0.2, 0.3, -0.1]),
            amplitude: Complex::new(1.0, 0.0),
        };
        let p = synthesize(&[src], &mics, &k).unwrap();
        let d1 = decompose(&p, 1, None, &ssl, &mics, &k).unwrap();
        let phase = Complex::new(0.6f64.cos(), 0.6f64.sin());
        let p2: PressureVector<f64> = p.iter().map(|v| v * phase).collect();
        let d2 = decompose(&p2, 1, None, &ssl, &mics, &k).unwrap();
        assert!(d1.sources[0].position.dist(&d2.sources[0].position) < 1e-9);
        let ratio = d2.sources[0].amplitude / d1.sources[0].amplitude;
        assert!((ratio - phase).norm() < 1e-7);
    }

    #[test]
    fn reconstruct_matches_synthesize_and_handles_edge_cases() {
        let mics = mics();
        let k = wavenumber();
        let srcs = [
            PointSource {
                position: Point3([0.3, 0.0, 0.0]),
                amplitude: Complex::new(0.5, 0.5),
            },
            PointSource {
                position: Point3([-0.1, 0.2, 0.4]),
                amplitude: Complex::new(-1.0, 0.25),
            },
        ];
        let direct = synthesize(&srcs, &mics, &k).unwrap();
        let via = reconstruct(&srcs, &mics.positions, &k).unwrap();
        for (a, b) in direct.iter().zip(&via) {
            assert_eq!(a, b, "same formula must agree exactly");
        }

        // zero amplitudes -> zero field
        let zsrc = [PointSource {
            position: Point3([0.0, 0.0, 0.0]),
            amplitude: Complex::new(0.0, 0.0),
        }];
        let z = reconstruct(&zsrc, &[Point3([0.5, 0.0, 0.0])], &k).unwrap();
        assert_eq!(z[0], Complex::new(0.0, 0.0));

        // k = 0, unit amplitude at origin, point at distance 1 -> 1/(4 pi)
        let k0 = Wavenumber::new(0.0, crate::acoustics::SPEED_OF_SOUND);
        let one = [PointSource {
            position: Point3([0.0, 0.0, 0.0]),
            amplitude: Complex::new(1.0, 0.0),
        }];
        let v = reconstruct(&one, &[Point3([1.0, 0.0, 0.0])], &k0).unwrap();
        assert!((v[0].re - 1.0 / (4.0 * std::f64::consts::PI)).abs() < 1e-15);
        assert_eq!(v[0].im, 0.0);

        // singular point errors
        let err = reconstruct(&one, &[Point3([0.0, 0.0, 0.0])], &k0).unwrap_err();
        assert!(matches!(err, PipelineError::SingularPoint));
    }

    #[test]
    fn oracle_separation_matches_single_source_localization() {
        let mics = mics();
        let k = wavenumber();
        let ssl = ssl_net();
        let s1 = PointSource {
            position: Point3([0.2, -0.3, 0.1]),
            amplitude: Complex::new(0.8, 0.1),
        };
        let s2 = PointSource {
            position: Point3([-0.4, 0.2, 0.3]),
            amplitude: Complex::new(-0.2, 0.9),
        };
        let p1 = synthesize(&[s1], &mics, &k).unwrap();
        let p2 = synthesize(&[s2], &mics, &k).unwrap();
        let mixture: PressureVector<f64> = p1.iter().zip(&p2).map(|(a, b)| a + b).collect();
        let dec = decompose_separated(&mixture, &[p1.clone(), p2.clone()], &ssl, &mics, &k)
            .unwrap();
        // with oracle separation, positions equal the single-source paths exactly
        assert_eq!(dec.sources[0].position.0, localize_single(&p1, &ssl).unwrap().0);
        assert_eq!(dec.sources[1].position.0, localize_single(&p2, &ssl).unwrap().0);
    }
}
