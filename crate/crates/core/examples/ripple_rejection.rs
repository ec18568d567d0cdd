//! Synthesizes the PMSM controller with and without oscillator rows and
//! compares the second-harmonic current left by a torque ripple the
//! feedforward does not know about.
//!
//! `cargo run --release --example ripple_rejection [ORDER]` (default 3; the
//! full synthesis takes about a minute at ORDER 3).

use num_complex::Complex64;
use vfharmonic::pmsm::{
    harmonic_spectrum, pmsm_augmented_system, pmsm_weights, simulate_closed_loop, Controller, OutputSpec, PmsmParams, ReferenceStep, Scenario,
    SimulationOptions, TorqueDisturbance,
};
use vfharmonic::synthesis::{synthesize_state_feedback, SynthesisOptions};

const RANGE: (f64, f64) = (10.0, 200.0);

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let order: usize = std::env::args().nth(1).map(|s| s.parse()).transpose()?.unwrap_or(3);
    let params = PmsmParams::default();
    let load = TorqueDisturbance::constant(1.0).with_harmonic(2, Complex64::new(0.5, 0.0));
    let scenario = Scenario {
        params,
        load: load.clone(),
        feedforward_load: load.dc(),
        schedule: vec![ReferenceStep { t: 0.0, omega_ref0: 100.0 }],
        initial_error: [0.5, -0.25, -0.25, 5.0],
        z0: Vec::new(),
        theta0: 0.0,
        t_end: 3.0,
    };
    for spec in [OutputSpec::default(), OutputSpec::without_mitigation()] {
        let aug = pmsm_augmented_system(&params, order, RANGE, &spec)?;
        let (q, r) = pmsm_weights(aug.system().n(), 1.0, 100.0);
        let res = synthesize_state_feedback(aug.system(), &q, &r, &SynthesisOptions::default())?;
        let ctl = Controller::from_synthesis(&res.to_file(), spec.clone(), RANGE)?;
        let trace = simulate_closed_loop(&scenario, &ctl, &SimulationOptions::default())?;
        let spectra = harmonic_spectrum(&trace, 10, 50)?;
        let ia = spectra.signal("i_a").and_then(|s| s.last()).ok_or("empty spectrum")?;
        println!(
            "harmonics {:?}: cost {:.3}, |I_a,2|/|I_a,4| = {:.2e}, max V/L_max = {:.4}",
            spec.harmonics,
            res.cost,
            ia[2] / ia[4],
            trace.max_level_ratio()
        );
    }
    Ok(())
}
