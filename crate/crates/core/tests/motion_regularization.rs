use myops_core::motion::{apply, estimate_ddf, mse_loss, smoothness_penalty, MotionConfig};
use myops_core::phantom::{generate, PhantomConfig};

#[test]
fn stronger_smoothing_trades_fit_for_smoothness() {
    let case = generate(&PhantomConfig {
        width: 40,
        height: 40,
        endo_radius: 8.0,
        epi_radius: 13.0,
        frames: 8,
        ..PhantomConfig::default()
    })
    .unwrap();
    let (reference, frame) = (case.sequence.reference(), case.sequence.frame(4));
    let mut last: Option<(f64, f64)> = None;
    for lambda in [0.1, 1.0, 10.0, 100.0] {
        let cfg = MotionConfig {
            lambda_smooth: lambda,
            ..MotionConfig::default()
        };
        let r = estimate_ddf(reference, frame, &cfg).unwrap();
        let mse = mse_loss(&apply(frame, &r).unwrap(), reference).unwrap();
        let smooth = smoothness_penalty(&r.phi);
        if let Some((m, s)) = last {
            assert!(mse >= m * 0.99, "lambda {lambda}: mse {mse} after {m}");
            assert!(smooth <= s * 1.01, "lambda {lambda}: smoothness {smooth} after {s}");
        }
        last = Some((mse, smooth));
    }
}
