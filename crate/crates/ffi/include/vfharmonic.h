#ifndef VFHARMONIC_H
#define VFHARMONIC_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum VfhStatus {
  VFH_STATUS_OK = 0,
  VFH_STATUS_NULL_POINTER = 1,
  VFH_STATUS_INVALID_ARGUMENT = 2,
  VFH_STATUS_CONFIG = 3,
  VFH_STATUS_INFEASIBLE = 4,
  VFH_STATUS_MISSING_ARTIFACT = 5,
  VFH_STATUS_DIVERGENCE = 6,
  VFH_STATUS_NUMERICAL = 7,
  VFH_STATUS_IO = 8,
  VFH_STATUS_PANIC = 9,
} VfhStatus;

/*
 Stored periodic gain with its output map and Lyapunov certificate.
 */
typedef struct VfhController VfhController;

typedef struct VfhEquilibrium VfhEquilibrium;

/*
 Frequency profile with its pseudo-period evaluator.
 */
typedef struct VfhPhase VfhPhase;

/*
 Machine constants, SI units.
 */
typedef struct VfhPmsmParams {
  double r;
  double l;
  double psi_f;
  double j;
  double b_f;
  uint32_t p;
} VfhPmsmParams;

/*
 Load-torque harmonic W_k = re + j·im for k > 0.
 */
typedef struct VfhTorqueHarmonic {
  uint32_t k;
  double re;
  double im;
} VfhTorqueHarmonic;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/*
 Library version, a static NUL-terminated string.
 */
const char *vfh_version(void);

/*
 Message of the last failed call on this thread, empty after a success.
 Valid until the next call into the library from the same thread.
 */
const char *vfh_last_error(void);

/*
 ω(t) = omega0 + a·t on [t_min, t_max].

 # Safety
 `out` must be a valid pointer to writable storage for one handle.
 */
enum VfhStatus vfh_phase_new_ramp(double omega0,
                                  double a,
                                  double theta0,
                                  double t_min,
                                  double t_max,
                                  struct VfhPhase **out);

/*
 ω(t) = (1/omega0 − K t)⁻¹ with K set by `eps_bar`.

 # Safety
 `out` must be a valid pointer to writable storage for one handle.
 */
enum VfhStatus vfh_phase_new_blowup(double omega0,
                                    double eps_bar,
                                    double theta0,
                                    double t_min,
                                    double t_max,
                                    struct VfhPhase **out);

/*
 Any profile given as a TOML table, e.g. `kind = "sampled"`,
 `t = [...]`, `omega = [...]`.

 # Safety
 `profile_toml` must be a NUL-terminated string, `out` a valid pointer.
 */
enum VfhStatus vfh_phase_new_toml(const char *profile_toml,
                                  double theta0,
                                  double t_min,
                                  double t_max,
                                  struct VfhPhase **out);

/*
 ω(t) and θ(t). Either output may be NULL.

 # Safety
 `h` must be a live handle; outputs NULL or valid.
 */
enum VfhStatus vfh_phase_eval(const struct VfhPhase *h, double t, double *omega, double *theta);

/*
 Pseudo-period T(t).

 # Safety
 `h` must be a live handle and `out` valid.
 */
enum VfhStatus vfh_phase_pseudo_period(const struct VfhPhase *h, double t, double *out);

/*
 Validity criterion ε(t), scanning the window with `samples` points (at least 64).

 # Safety
 `h` must be a live handle and `out` valid.
 */
enum VfhStatus vfh_phase_epsilon(const struct VfhPhase *h, double t, size_t samples, double *out);

/*
 # Safety
 `h` must be NULL or a handle not yet freed.
 */
void vfh_phase_free(struct VfhPhase *h);

/*
 Reference machine constants.
 */
struct VfhPmsmParams vfh_pmsm_params_default(void);

/*
 Phase-periodic equilibrium for load W₀ plus `n_harmonics` harmonics.

 # Safety
 `params` and `out` valid; `harmonics` valid for `n_harmonics` entries.
 */
enum VfhStatus vfh_equilibrium_new(const struct VfhPmsmParams *params,
                                   double omega_ref0,
                                   double w0,
                                   const struct VfhTorqueHarmonic *harmonics,
                                   size_t n_harmonics,
                                   size_t k_eq,
                                   double tol,
                                   struct VfhEquilibrium **out);

/*
 DC q-axis current of the equilibrium, A.

 # Safety
 `h` must be a live handle and `out` valid.
 */
enum VfhStatus vfh_equilibrium_iq0(const struct VfhEquilibrium *h, double *out);

/*
 Speed phasor Ω_k; zero beyond the computed band.

 # Safety
 `h` must be a live handle, `re` and `im` valid.
 */
enum VfhStatus vfh_equilibrium_omega_k(const struct VfhEquilibrium *h,
                                       int64_t k,
                                       double *re,
                                       double *im);

/*
 # Safety
 `h` must be NULL or a handle not yet freed.
 */
void vfh_equilibrium_free(struct VfhEquilibrium *h);

/*
 Loads a gain file written by the synthesis for the output map given by
 `q_axis` and the `n_harmonics` mitigated harmonics.

 # Safety
 `gain_path` NUL-terminated, `harmonics` valid for `n_harmonics`, `out` valid.
 */
enum VfhStatus vfh_controller_load(const char *gain_path,
                                   bool q_axis,
                                   const uint32_t *harmonics,
                                   size_t n_harmonics,
                                   double omega_min,
                                   double omega_max,
                                   struct VfhController **out);

/*
 Gain dimensions: 3 inputs by 4 + outputs columns.

 # Safety
 `h` must be a live handle, `rows` and `cols` valid.
 */
enum VfhStatus vfh_controller_dims(const struct VfhController *h, size_t *rows, size_t *cols);

/*
 K(θ), row-major, into `buf` of length `len` ≥ rows·cols.

 # Safety
 `h` must be a live handle and `buf` valid for `len` doubles.
 */
enum VfhStatus vfh_controller_gain(const struct VfhController *h,
                                   double theta,
                                   double *buf,
                                   size_t len);

/*
 Largest certified Lyapunov level keeping the speed inside the synthesis
 interval around `omega_ref0`.

 # Safety
 `h` must be a live handle and `out` valid.
 */
enum VfhStatus vfh_controller_level_max(const struct VfhController *h,
                                        double omega_ref0,
                                        double *out);

/*
 # Safety
 `h` must be NULL or a handle not yet freed.
 */
void vfh_controller_free(struct VfhController *h);

/*
 Runs one command of the command-line tool (`epsilon`, `synthesize`,
 `simulate` or `equilibrium`) on a config file. `out_dir` may be NULL.
 The printed summary is available through [`vfh_last_error`] on success
 as well.

 # Safety
 `command` and `config_path` NUL-terminated; `out_dir` NULL or NUL-terminated.
 */
enum VfhStatus vfh_run(const char *command,
                       const char *config_path,
                       const char *out_dir,
                       bool no_mitigation);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* VFHARMONIC_H */
