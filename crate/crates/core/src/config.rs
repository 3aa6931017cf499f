//! Flat TOML run configuration. Every knob lives at the top level; unknown
//! keys are rejected so typos fail loudly. Command-line flags override file
//! values, which override the built-in defaults.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Intrinsics;
use crate::losses::TrainConfig;
use crate::recon::{OccupancyConfig, VolumeConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AppConfig {
    // training
    pub epochs: usize,
    pub rays_per_batch: usize,
    pub steps_per_epoch: usize,
    pub lr: f64,
    pub gamma: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub k: usize,
    pub m: usize,
    pub t_near: f64,
    pub t_far: f64,
    pub levels_pos: usize,
    pub levels_dir: usize,
    pub hidden_width: usize,
    pub hidden_layers: usize,
    pub gauss_hidden_width: usize,
    pub gauss_hidden_layers: usize,
    pub channels: usize,
    pub grid_size: usize,
    pub fov_margin_deg: f64,
    pub w_gauss: f64,
    pub w_surface: f64,

    // dataset generation
    pub frames: usize,
    pub frame_step: f64,
    pub image_width: usize,
    pub image_height: usize,
    pub focal: f64,

    // reconstruction
    pub volume_dim: usize,
    pub volume_origin: [f64; 3],
    pub voxel_size: f64,
    pub truncation: f64,
    pub occ_slope: f64,
    pub occ_cap: f64,
    pub rho: f64,
    pub max_dist: f64,
    pub yaws_deg: Vec<f64>,
    pub include_origin: bool,
    pub fuse_average: bool,

    // evaluation
    pub depth_cap: f64,
}

impl Default for AppConfig {
    fn default() -> AppConfig {
        let t = TrainConfig::default();
        let v = VolumeConfig::default();
        let o = OccupancyConfig::default();
        AppConfig {
            epochs: t.epochs,
            rays_per_batch: t.rays_per_batch,
            steps_per_epoch: t.steps_per_epoch,
            lr: t.lr,
            gamma: t.gamma,
            weight_decay: t.weight_decay,
            seed: t.seed,
            k: t.k,
            m: t.m,
            t_near: t.t_near,
            t_far: t.t_far,
            levels_pos: t.levels_pos,
            levels_dir: t.levels_dir,
            hidden_width: t.hidden_width,
            hidden_layers: t.hidden_layers,
            gauss_hidden_width: t.gauss_hidden_width,
            gauss_hidden_layers: t.gauss_hidden_layers,
            channels: t.channels,
            grid_size: t.grid_size,
            fov_margin_deg: t.fov_margin_deg,
            w_gauss: t.w_gauss,
            w_surface: t.w_surface,
            frames: 12,
            frame_step: 0.4,
            image_width: 64,
            image_height: 48,
            focal: 60.0,
            volume_dim: v.dims[0],
            volume_origin: v.origin,
            voxel_size: v.voxel_size,
            truncation: v.truncation,
            occ_slope: o.slope,
            occ_cap: o.cap,
            rho: 0.5,
            max_dist: 10.0,
            yaws_deg: vec![-10.0, 0.0, 10.0],
            include_origin: true,
            fuse_average: false,
            depth_cap: 80.0,
        }
    }
}

impl AppConfig {
    pub fn load(path: &Path) -> Result<AppConfig> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            rays_per_batch: self.rays_per_batch,
            steps_per_epoch: self.steps_per_epoch,
            lr: self.lr,
            gamma: self.gamma,
            weight_decay: self.weight_decay,
            seed: self.seed,
            k: self.k,
            m: self.m,
            t_near: self.t_near,
            t_far: self.t_far,
            levels_pos: self.levels_pos,
            levels_dir: self.levels_dir,
            hidden_width: self.hidden_width,
            hidden_layers: self.hidden_layers,
            gauss_hidden_width: self.gauss_hidden_width,
            gauss_hidden_layers: self.gauss_hidden_layers,
            channels: self.channels,
            grid_size: self.grid_size,
            fov_margin_deg: self.fov_margin_deg,
            w_gauss: self.w_gauss,
            w_surface: self.w_surface,
        }
    }

    pub fn volume_config(&self) -> VolumeConfig {
        VolumeConfig {
            dims: [self.volume_dim; 3],
            origin: self.volume_origin,
            voxel_size: self.voxel_size,
            truncation: self.truncation,
        }
    }

    pub fn occupancy_config(&self) -> OccupancyConfig {
        OccupancyConfig {
            slope: self.occ_slope,
            cap: self.occ_cap,
        }
    }

    pub fn intrinsics(&self) -> Intrinsics {
        Intrinsics {
            fx: self.focal,
            fy: self.focal,
            cx: self.image_width as f64 / 2.0,
            cy: self.image_height as f64 / 2.0,
            width: self.image_width,
            height: self.image_height,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.train_config().validate()?;
        self.volume_config().validate()?;
        self.intrinsics().validate()?;
        if self.frames < 2 {
            return Err(Error::Config(format!("frames {} must be >= 2", self.frames)));
        }
        if self.yaws_deg.is_empty() {
            return Err(Error::Config("yaws_deg must not be empty".into()));
        }
        Ok(())
    }
}

/// Relative pose spec on the command line: forward meters and yaw degrees,
/// e.g. `+1.5m,-10deg`.
pub fn parse_pose_spec(s: &str) -> Result<(f64, f64)> {
    let bad = || Error::Config(format!("pose spec '{s}' (expected e.g. '+1.5m,-10deg')"));
    let (fwd, yaw) = s.split_once(',').ok_or_else(bad)?;
    let fwd = fwd
        .trim()
        .strip_suffix('m')
        .ok_or_else(bad)?
        .parse::<f64>()
        .map_err(|_| bad())?;
    let yaw = yaw
        .trim()
        .strip_suffix("deg")
        .ok_or_else(bad)?
        .parse::<f64>()
        .map_err(|_| bad())?;
    if !fwd.is_finite() || !yaw.is_finite() {
        return Err(bad());
    }
    Ok((fwd, yaw))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        AppConfig::default().validate().unwrap();
    }

    #[test]
    fn toml_round_trip_and_partial_files() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        std::fs::write(&path, "epochs = 42\nlr = 0.005\nyaws_deg = [-5.0, 5.0]\n").unwrap();
        let cfg = AppConfig::load(&path).unwrap();
        assert_eq!(cfg.epochs, 42);
        assert_eq!(cfg.lr, 0.005);
        assert_eq!(cfg.yaws_deg, vec![-5.0, 5.0]);
        // untouched keys keep defaults
        assert_eq!(cfg.rays_per_batch, AppConfig::default().rays_per_batch);
    }

    #[test]
    fn unknown_keys_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.toml");
        std::fs::write(&path, "epochs = 10\nlearning_rate = 0.1\n").unwrap();
        let err = AppConfig::load(&path).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
        assert!(err.to_string().contains("learning_rate"));
    }

    #[test]
    fn pose_specs_parse() {
        assert_eq!(parse_pose_spec("+1.5m,-10deg").unwrap(), (1.5, -10.0));
        assert_eq!(parse_pose_spec("0m,0deg").unwrap(), (0.0, 0.0));
        assert_eq!(parse_pose_spec(" 2m , +3.5deg ").unwrap(), (2.0, 3.5));
        assert!(parse_pose_spec("1.5,-10").is_err());
        assert!(parse_pose_spec("x").is_err());
        assert!(parse_pose_spec("1.5m,-10rad").is_err());
    }
}
