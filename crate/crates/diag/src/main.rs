use monorecon::losses::{total_loss, LossTerms, ModelState, Sequence, TrainConfig};
use monorecon::geometry::Intrinsics;
use monorecon::scenegen::{self, SequenceSpec};
use std::path::Path;


fn probe_ray(state: &ModelState, seq: &Sequence, cfg: &TrainConfig) -> String {
    use monorecon::render::{render_ray, SampleSource};
    use monorecon::encoder::encode;
    use monorecon::geometry::{ray_for_pixel, Ray};
    let grid = encode(&state.encoder, &seq.images[0], &seq.intrinsics).unwrap();
    let rcfg = cfg.render_config();
    let world = ray_for_pixel(&seq.intrinsics, &seq.poses[1], (32.0, 24.0)).unwrap();
    let inv = seq.poses[0].inverse();
    let ray = Ray { origin: inv.transform_point(&world.origin), direction: inv.transform_dir(&world.direction) };
    let mut rng = monorecon::nn::stream_rng(99, 99, 0);
    let fwd = render_ray(&state.field, &state.gauss, &grid, &ray, &rcfg, SampleSource::Draw(&mut rng)).unwrap();
    let gt = {
        let scene = scenegen::default_scene(7);
        scene.analytic_depth(&world).unwrap_or(-1.0)
    };
    format!(
        "mu {:?} s {:?} D {:.2} ws {:.3} gt {:.2}",
        fwd.mixture_eval.mixture.means.iter().map(|v| (v * 10.0).round() / 10.0).collect::<Vec<_>>(),
        fwd.mixture_eval.mixture.stds.iter().map(|v| (v * 100.0).round() / 100.0).collect::<Vec<_>>(),
        fwd.render.depth,
        fwd.render.weight_sum,
        gt,
    )
}

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let mode = args.get(1).map(String::as_str).unwrap_or("rgb");
    let steps: usize = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(400);
    let lr: f64 = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(2e-3);

    let dir = Path::new("/tmp/diag/data");
    if !dir.join("manifest.json").exists() {
        let scene = scenegen::default_scene(7);
        let k = Intrinsics { fx: 60.0, fy: 60.0, cx: 32.0, cy: 24.0, width: 64, height: 48 };
        let spec = SequenceSpec { camera: k, trajectory: scenegen::default_trajectory(12, 0.4, 7) };
        scenegen::generate_sequence(&scene, &spec, 7, dir).unwrap();
    }
    let seq = Sequence::load(dir).unwrap();
    let mut cfg = TrainConfig { lr, t_far: 22.0, ..TrainConfig::default() };
    let terms = match mode {
        "rgb" => LossTerms { rgb: true, reproj: false, samp: false },
        "rgbrp" => LossTerms { rgb: true, reproj: true, samp: false },
        "all" => LossTerms::default(),
        "nosurf" => {
            cfg.w_surface = 0.0;
            LossTerms::default()
        }
        _ => panic!("mode"),
    };
    let mut state = ModelState::init(&cfg);
    let mut adam = state.adam.clone();
    for step in 0..steps {
        let epoch = step / 8;
        adam.lr = cfg.lr * cfg.gamma.powi(epoch as i32);
        let (row, grads) = total_loss(&state, &seq, &cfg, epoch, step % 8, terms).unwrap();
        let mut params = Vec::new();
        state.write_params(&mut params);
        let mut g = Vec::new();
        grads.write_grads(&mut g);
        let gnorm: f64 = g.iter().map(|v| v * v).sum::<f64>().sqrt();
        adam.step(&mut params, &g);
        state.read_params(&mut params.iter().copied());
        if step % 40 == 0 || step == steps - 1 {
            println!(
                "step {step:4} rgb {:.4} reproj {:.4} gauss {:.4} surf {:.4} |g| {gnorm:.3}\n      {}",
                row.l_rgb, row.l_reproj, row.l_gauss, row.l_surface, probe_ray(&state, &seq, &cfg)
            );
        }
        state.adam = adam.clone();
    }
    let out = format!("/tmp/diag/{mode}.ckpt");
    monorecon::checkpoint::save(Path::new(&out), &state, &cfg).unwrap();
    println!("saved {out}");
}
