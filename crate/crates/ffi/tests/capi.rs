use std::ffi::{c_char, CStr};
use std::path::Path;
use std::process::Command;
use std::ptr;

use tmpd_ffi::*;

fn last_error() -> String {
    let mut buf = vec![0 as c_char; 256];
    unsafe {
        tmpd_last_error(buf.as_mut_ptr(), buf.len());
        CStr::from_ptr(buf.as_ptr()).to_string_lossy().into_owned()
    }
}

fn rows(s: *const TmpdSamples) -> (usize, usize, Vec<f64>) {
    let (mut r, mut c) = (0, 0);
    unsafe {
        assert_eq!(tmpd_samples_shape(s, &mut r, &mut c), TmpdStatus::Ok);
        (r, c, std::slice::from_raw_parts(tmpd_samples_data(s), r * c).to_vec())
    }
}

#[test]
fn gmm_round_trip() {
    unsafe {
        let mut prior = ptr::null_mut();
        assert_eq!(tmpd_prior_gmm(8, &mut prior), TmpdStatus::Ok);
        assert_eq!(tmpd_prior_dim(prior), 8);

        let mut score = [0.0; 8];
        let x = [0.5; 8];
        assert_eq!(tmpd_prior_score(prior, 0.5, 0.5, x.as_ptr(), score.as_mut_ptr(), 8), TmpdStatus::Ok);
        assert!(score.iter().all(|v| v.is_finite()));

        let mut mm = ptr::null_mut();
        assert_eq!(tmpd_measurement_generate(prior, 2, 0.1, false, 4, &mut mm), TmpdStatus::Ok);
        let (mut dy, mut dx) = (0, 0);
        assert_eq!(tmpd_measurement_dims(mm, &mut dy, &mut dx), TmpdStatus::Ok);
        assert_eq!((dy, dx), (2, 8));
        let mut y = [0.0; 2];
        assert_eq!(tmpd_measurement_y(mm, y.as_mut_ptr(), 2), TmpdStatus::Ok);

        let opts = TmpdSamplerOptions {
            guidance: c"tmpd".as_ptr(),
            sampler: c"ddpm-vp".as_ptr(),
            steps: 50,
            batch: 40,
            seed: 1,
            beta_min: 0.0,
            beta_max: 500.0,
            sigma_min: 0.0,
            sigma_max: 0.0,
        };
        let mut a = ptr::null_mut();
        let mut b = ptr::null_mut();
        assert_eq!(tmpd_sample(prior, mm, &opts, &mut a), TmpdStatus::Ok);
        assert_eq!(tmpd_exact_posterior_sample(prior, mm, 40, 2, &mut b), TmpdStatus::Ok);
        let (r, c, data) = rows(a);
        assert_eq!((r, c), (40, 8));
        assert!(data.iter().all(|v| v.is_finite()));

        let mut d = -1.0;
        assert_eq!(tmpd_sliced_w1(a, a, 32, 0, &mut d), TmpdStatus::Ok);
        assert_eq!(d, 0.0);
        assert_eq!(tmpd_sliced_w1(a, b, 32, 0, &mut d), TmpdStatus::Ok);
        assert!(d > 0.0 && d.is_finite());

        // same seed, same bytes
        let mut again = ptr::null_mut();
        assert_eq!(tmpd_sample(prior, mm, &opts, &mut again), TmpdStatus::Ok);
        assert_eq!(rows(again).2, data);

        for s in [a, b, again] {
            tmpd_samples_free(s);
        }
        tmpd_measurement_free(mm);
        tmpd_prior_free(prior);
    }
}

#[test]
fn gaussian_w2_translation() {
    let m1 = [0.0, 0.0];
    let m2 = [3.0, 4.0];
    let c = [2.0, 0.5, 0.5, 1.0];
    let mut d = 0.0;
    unsafe {
        assert_eq!(tmpd_gaussian_w2(2, m1.as_ptr(), c.as_ptr(), m2.as_ptr(), c.as_ptr(), &mut d), TmpdStatus::Ok);
    }
    assert!((d - 5.0).abs() < 1e-12);
}

#[test]
fn errors_are_reported() {
    unsafe {
        let mut prior = ptr::null_mut();
        assert_eq!(tmpd_prior_gmm(7, &mut prior), TmpdStatus::InvalidArgument);
        assert!(prior.is_null());
        assert!(last_error().contains("even"), "{}", last_error());

        assert_eq!(tmpd_prior_gmm(4, ptr::null_mut()), TmpdStatus::NullPointer);
        assert_eq!(tmpd_prior_dim(ptr::null()), 0);

        let cov = [1.0, 2.0, 2.0, 1.0];
        let mean = [0.0, 0.0];
        assert_eq!(tmpd_prior_gaussian(2, mean.as_ptr(), cov.as_ptr(), &mut prior), TmpdStatus::Linalg);

        assert_eq!(tmpd_prior_grf(3, -5.0, 5.0, 1e-6, &mut prior), TmpdStatus::Ok);
        let mut mm = ptr::null_mut();
        assert_eq!(tmpd_measurement_generate(prior, 4, 0.1, true, 1, &mut mm), TmpdStatus::Ok);
        let opts = TmpdSamplerOptions {
            guidance: c"magic".as_ptr(),
            sampler: c"em-vp".as_ptr(),
            steps: 10,
            batch: 4,
            seed: 0,
            beta_min: 0.0,
            beta_max: 0.0,
            sigma_min: 0.0,
            sigma_max: 0.0,
        };
        let mut s = ptr::null_mut();
        assert_eq!(tmpd_sample(prior, mm, &opts, &mut s), TmpdStatus::InvalidArgument);
        assert!(last_error().contains("magic"));
        let mut y = [0.0; 3];
        assert_eq!(tmpd_measurement_y(mm, y.as_mut_ptr(), 3), TmpdStatus::BufferTooSmall);

        // a truncated copy is still NUL-terminated and the full length is returned
        let mut small = [1 as c_char; 4];
        let n = tmpd_last_error(small.as_mut_ptr(), small.len());
        assert!(n > 3 && small[3] == 0);

        tmpd_measurement_free(mm);
        tmpd_prior_free(prior);
        tmpd_prior_free(ptr::null_mut());
        tmpd_samples_free(ptr::null_mut());
    }
}

#[test]
fn version_string() {
    let v = unsafe { CStr::from_ptr(tmpd_version()) };
    assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
}

#[test]
fn header_compiles_as_c() {
    let header = Path::new(env!("CARGO_MANIFEST_DIR")).join("include/tmpd.h");
    let text = std::fs::read_to_string(&header).unwrap();
    for f in ["tmpd_sample", "tmpd_sliced_w1", "tmpd_gaussian_w2", "tmpd_last_error", "TMPD_STATUS_PANIC"] {
        assert!(text.contains(f), "{f} missing from header");
    }
    let Ok(out) = Command::new("cc").args(["-fsyntax-only", "-Wall", "-Werror", "-x", "c"]).arg(&header).output() else {
        eprintln!("no C compiler found; skipping syntax check");
        return;
    };
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}
