use std::ffi::{CStr, CString};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::ptr;

use vfharmonic::phase::closed_form_ramp_epsilon;
use vfharmonic_ffi::*;

fn last() -> String {
    unsafe { CStr::from_ptr(vfh_last_error()).to_string_lossy().into_owned() }
}

fn core_configs() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/configs")
}

#[test]
fn ramp_epsilon_through_handle() {
    unsafe {
        let mut h: *mut VfhPhase = ptr::null_mut();
        assert_eq!(vfh_phase_new_ramp(50.0, 5.0, 0.0, -1.0, 10.0, &mut h), VfhStatus::Ok);
        assert!(!h.is_null());
        for t in [0.0, 2.5, 7.0] {
            let mut eps = f64::NAN;
            assert_eq!(vfh_phase_epsilon(h, t, 256, &mut eps), VfhStatus::Ok);
            let cf = closed_form_ramp_epsilon(50.0, 5.0, t).unwrap();
            assert!(((eps - cf) / cf).abs() < 1e-6);
        }
        let (mut w, mut th, mut big_t) = (0.0, 0.0, 0.0);
        assert_eq!(vfh_phase_eval(h, 2.0, &mut w, &mut th), VfhStatus::Ok);
        assert!((w - 60.0).abs() < 1e-12 && (th - 110.0).abs() < 1e-9);
        assert_eq!(vfh_phase_pseudo_period(h, 2.0, &mut big_t), VfhStatus::Ok);
        assert!(big_t > 0.0 && big_t < 2.0 * std::f64::consts::PI / 50.0);

        let mut eps = 0.0;
        assert_eq!(vfh_phase_epsilon(h, -0.99, 256, &mut eps), VfhStatus::InvalidArgument);
        assert!(last().contains("leaves the domain"), "{}", last());
        vfh_phase_free(h);
    }
}

#[test]
fn toml_profile_and_bad_input() {
    unsafe {
        let text = CString::new("kind = \"sampled\"\nt = [-1.0, 0.0, 5.0]\nomega = [10.0, 10.0, 20.0]\n").unwrap();
        let mut h = ptr::null_mut();
        assert_eq!(vfh_phase_new_toml(text.as_ptr(), 0.0, -1.0, 5.0, &mut h), VfhStatus::Ok);
        let mut w = 0.0;
        assert_eq!(vfh_phase_eval(h, 2.5, &mut w, ptr::null_mut()), VfhStatus::Ok);
        assert!((w - 15.0).abs() < 1e-12);
        vfh_phase_free(h);

        let bad = CString::new("kind = \"ramp\"\nomega0 = 1.0\n").unwrap();
        let mut h = ptr::null_mut();
        assert_eq!(vfh_phase_new_toml(bad.as_ptr(), 0.0, -1.0, 5.0, &mut h), VfhStatus::Config);
        assert!(h.is_null());
        assert_eq!(vfh_phase_new_ramp(-5.0, 0.0, 0.0, -1.0, 5.0, &mut h), VfhStatus::InvalidArgument);
    }
}

#[test]
fn equilibrium_handle() {
    unsafe {
        let p = vfh_pmsm_params_default();
        let ripple = [VfhTorqueHarmonic { k: 2, re: 0.5, im: 0.0 }];
        let mut h = ptr::null_mut();
        assert_eq!(vfh_equilibrium_new(&p, 100.0, 1.0, ripple.as_ptr(), 1, 4, 1e-10, &mut h), VfhStatus::Ok);
        let mut iq = 0.0;
        assert_eq!(vfh_equilibrium_iq0(h, &mut iq), VfhStatus::Ok);
        assert!((iq - 3.571428571).abs() < 1e-6);
        let (mut re, mut im) = (0.0, 0.0);
        assert_eq!(vfh_equilibrium_omega_k(h, 0, &mut re, &mut im), VfhStatus::Ok);
        assert_eq!((re, im), (100.0, 0.0));
        assert_eq!(vfh_equilibrium_omega_k(h, 2, &mut re, &mut im), VfhStatus::Ok);
        assert!(im.abs() > 1e-3);
        vfh_equilibrium_free(h);

        let light = VfhPmsmParams { j: 1e-4, b_f: 1e-6, ..p };
        let big = [VfhTorqueHarmonic { k: 1, re: 50.0, im: 0.0 }];
        let mut h = ptr::null_mut();
        assert_eq!(vfh_equilibrium_new(&light, 1.0, 0.0, big.as_ptr(), 1, 4, 1e-10, &mut h), VfhStatus::Divergence);
    }
}

#[test]
fn run_synthesis_then_load_controller() {
    let dir = tempfile::tempdir().unwrap();
    let out = CString::new(dir.path().to_str().unwrap()).unwrap();
    let cfg = CString::new(core_configs().join("pmsm.toml").to_str().unwrap()).unwrap();
    let gain = CString::new(dir.path().join("gain_no_mitigation.json").to_str().unwrap()).unwrap();
    unsafe {
        let mut h = ptr::null_mut();
        assert_eq!(vfh_controller_load(gain.as_ptr(), false, ptr::null(), 0, 10.0, 200.0, &mut h), VfhStatus::MissingArtifact);

        let synth = CString::new("synthesize").unwrap();
        assert_eq!(vfh_run(synth.as_ptr(), cfg.as_ptr(), out.as_ptr(), true), VfhStatus::Ok, "{}", last());
        assert!(last().contains("cost"));

        assert_eq!(vfh_controller_load(gain.as_ptr(), false, ptr::null(), 0, 10.0, 200.0, &mut h), VfhStatus::Ok, "{}", last());
        let (mut r, mut c) = (0, 0);
        assert_eq!(vfh_controller_dims(h, &mut r, &mut c), VfhStatus::Ok);
        assert_eq!((r, c), (3, 6));
        let mut k = vec![0.0; r * c];
        assert_eq!(vfh_controller_gain(h, 0.3, k.as_mut_ptr(), k.len()), VfhStatus::Ok);
        assert!(k.iter().any(|v| *v != 0.0) && k.iter().all(|v| v.is_finite()));
        assert_eq!(vfh_controller_gain(h, 0.3, k.as_mut_ptr(), 2), VfhStatus::InvalidArgument);
        let mut lmax = 0.0;
        assert_eq!(vfh_controller_level_max(h, 100.0, &mut lmax), VfhStatus::Ok);
        assert!(lmax > 0.0);
        vfh_controller_free(h);

        let wrong = [0u32, 2, 6, 8];
        let mut h = ptr::null_mut();
        assert_eq!(vfh_controller_load(gain.as_ptr(), false, wrong.as_ptr(), 4, 10.0, 200.0, &mut h), VfhStatus::InvalidArgument);

        let bogus = CString::new("plot").unwrap();
        assert_eq!(vfh_run(bogus.as_ptr(), cfg.as_ptr(), out.as_ptr(), false), VfhStatus::InvalidArgument);
    }
}

/// Compiles a C program against the generated header and links it to the
/// shared library built alongside this test.
#[test]
fn c_program_links_against_header() {
    let Ok(cc) = which_cc() else {
        eprintln!("no C compiler found, skipping");
        return;
    };
    let manifest = Path::new(env!("CARGO_MANIFEST_DIR"));
    let exe = std::env::current_exe().unwrap();
    let lib_dir = exe.parent().and_then(Path::parent).unwrap().to_path_buf();
    assert!(lib_dir.join("libvfharmonic_ffi.so").is_file() || lib_dir.join("libvfharmonic_ffi.dylib").is_file(), "shared library not in {}", lib_dir.display());
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("smoke.c");
    std::fs::write(
        &src,
        r#"#include <math.h>
#include <stdio.h>
#include "vfharmonic.h"

int main(void) {
    VfhPhase *h = NULL;
    if (vfh_phase_new_ramp(50.0, 5.0, 0.0, -1.0, 10.0, &h) != VFH_STATUS_OK) return 10;
    double eps = 0.0;
    if (vfh_phase_epsilon(h, 3.0, 256, &eps) != VFH_STATUS_OK) return 11;
    vfh_phase_free(h);
    double w = 65.0, x = 4.0 * 3.141592653589793 * 5.0 / (w * w);
    double cf = 1.0 / sqrt(1.0 - x) - 1.0;
    if (fabs(eps - cf) / cf > 1e-6) return 12;
    if (vfh_phase_new_ramp(-1.0, 0.0, 0.0, -1.0, 10.0, &h) == VFH_STATUS_OK) return 13;
    if (vfh_last_error()[0] == '\0') return 14;
    VfhPmsmParams p = vfh_pmsm_params_default();
    VfhEquilibrium *eq = NULL;
    if (vfh_equilibrium_new(&p, 100.0, 1.0, NULL, 0, 4, 1e-10, &eq) != VFH_STATUS_OK) return 15;
    double iq = 0.0;
    vfh_equilibrium_iq0(eq, &iq);
    vfh_equilibrium_free(eq);
    printf("%s %.6f %.6f\n", vfh_version(), eps, iq);
    return 0;
}
"#,
    )
    .unwrap();
    let bin = dir.path().join("smoke");
    let status = Command::new(&cc)
        .arg("-std=c99")
        .arg("-Wall")
        .arg("-Werror")
        .arg("-I")
        .arg(manifest.join("include"))
        .arg(&src)
        .arg("-o")
        .arg(&bin)
        .arg("-L")
        .arg(&lib_dir)
        .arg("-lvfharmonic_ffi")
        .arg("-lm")
        .arg(format!("-Wl,-rpath,{}", lib_dir.display()))
        .status()
        .unwrap();
    assert!(status.success(), "C compilation failed");
    let out = Command::new(&bin).output().unwrap();
    assert!(out.status.success(), "smoke program exited with {:?}", out.status.code());
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.starts_with(env!("CARGO_PKG_VERSION")) && text.trim_end().ends_with("3.571429"), "{text}");
}

fn which_cc() -> Result<String, ()> {
    for cc in ["cc", "gcc", "clang"] {
        if Command::new(cc).arg("--version").output().map(|o| o.status.success()).unwrap_or(false) {
            return Ok(cc.to_string());
        }
    }
    Err(())
}
