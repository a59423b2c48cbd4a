//! Manual survey of the mosaic texture statistics; run with
//! `cargo test -p supix --test texture_survey -- --ignored --nocapture`
//! when retuning the generator.

use supix::entropy::entropy_sweep;
use supix::harness::synth::{texture_image_custom, TextureParams};
use supix::slic::SlicParams;

fn loglog_slope(points: &[(f64, f64)]) -> f64 {
    let n = points.len() as f64;
    let (mut sx, mut sy, mut sxx, mut sxy) = (0.0, 0.0, 0.0, 0.0);
    for &(x, y) in points {
        let (lx, ly) = (x.ln(), y.ln());
        sx += lx;
        sy += ly;
        sxx += lx * lx;
        sxy += lx * ly;
    }
    (n * sxy - sx * sy) / (n * sxx - sx * sx)
}

#[test]
#[ignore = "diagnostic tool, not a correctness test"]
fn survey_texture_entropy_slopes() {
    let s_list = [1usize, 13, 24, 145, 425, 894, 7185];
    let variants: Vec<(&str, TextureParams)> = vec![
        ("default", TextureParams::default()),
        (
            "amp 0.05",
            TextureParams { noise_amp: 0.05, ..TextureParams::default() },
        ),
        (
            "mid radius 6.5",
            TextureParams {
                patches: vec![(12.0, 2), (6.5, 4), (3.0, 4)],
                ..TextureParams::default()
            },
        ),
        (
            "amp 0.05, mid 6.5",
            TextureParams {
                noise_amp: 0.05,
                patches: vec![(12.0, 2), (6.5, 4), (3.0, 4)],
                ..TextureParams::default()
            },
        ),
    ];
    for (name, params) in &variants {
        println!("==== {name}: {params:?}");
        let mut slopes = Vec::new();
        let mut worst_ratio: f64 = 0.0;
        for seed in 0..10u64 {
            let img = texture_image_custom(seed, params);
            let reports = entropy_sweep(&img, &s_list, &SlicParams::new(1)).unwrap();
            let mut points = Vec::new();
            let mut ratios = Vec::new();
            for r in &reports {
                points.push((r.s as f64, r.m.max(1e-12)));
                if r.s >= 13 {
                    ratios.push(r.sp_entropy / r.window_entropy.max(1e-12));
                }
            }
            let slope = loglog_slope(&points);
            let rmax = ratios.iter().cloned().fold(0.0f64, f64::max);
            worst_ratio = worst_ratio.max(rmax);
            println!(
                "  seed {seed}: slope {slope:.3}  max_ratio {rmax:.3}  sp13={:.4} sp24={:.4} sp145={:.4} sp425={:.4} sp7185={:.5}",
                reports[1].sp_entropy,
                reports[2].sp_entropy,
                reports[3].sp_entropy,
                reports[4].sp_entropy,
                reports[6].sp_entropy
            );
            slopes.push(slope);
        }
        let lo = slopes.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = slopes.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        println!("  -> slopes in [{lo:.3}, {hi:.3}], worst ratio {worst_ratio:.3}");
    }
}
