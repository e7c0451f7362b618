//! Flat `key = value` run configuration.

use std::path::PathBuf;

use sem_core::pipeline::PipelineConfig;

/// Pipeline settings plus the paths of one `match` run.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct RunConfig {
    pub pipeline: PipelineConfig,
    pub ref_input: Option<PathBuf>,
    pub src_input: Option<PathBuf>,
    pub cam_ref: Option<PathBuf>,
    pub cam_src: Option<PathBuf>,
    pub params: Option<PathBuf>,
    pub gt: Option<PathBuf>,
    pub pose_gt: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, String>
where
    T::Err: std::fmt::Display,
{
    value
        .parse()
        .map_err(|e| format!("bad value `{value}` for `{key}`: {e}"))
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), String> {
        let p = &mut self.pipeline;
        match key {
            "s0" => p.s0 = parse(key, value)?,
            "anchors" => p.anchors = parse(key, value)?,
            "sigma_h" => p.sigma_h = parse(key, value)?,
            "theta" => p.theta = parse(key, value)?,
            "iters" => p.iterations = parse(key, value)?,
            "tau" => p.tau = parse(key, value)?,
            "fine_tau" => p.fine_tau = parse(key, value)?,
            "window" => p.window = parse(key, value)?,
            "seed" => p.seed = parse(key, value)?,
            "use_anchors" => p.use_anchors = parse(key, value)?,
            "use_bands" => p.use_bands = parse(key, value)?,
            "pose_iterations" => p.pose_iterations = parse(key, value)?,
            "pose_threshold" => p.pose_threshold_cells = parse(key, value)?,
            "ref" => self.ref_input = Some(value.into()),
            "src" => self.src_input = Some(value.into()),
            "cam_ref" => self.cam_ref = Some(value.into()),
            "cam_src" => self.cam_src = Some(value.into()),
            "params" => self.params = Some(value.into()),
            "gt" => self.gt = Some(value.into()),
            "pose_gt" => self.pose_gt = Some(value.into()),
            "out" => self.out = Some(value.into()),
            _ => return Err(format!("unknown config key `{key}`")),
        }
        Ok(())
    }

    /// Applies a config file on top of `self`. Blank lines and `#` comments are skipped.
    pub fn apply_text(&mut self, text: &str) -> Result<(), String> {
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| format!("config line {}: expected key=value", n + 1))?;
            self.set(k.trim(), v.trim())
                .map_err(|e| format!("config line {}: {e}", n + 1))?;
        }
        Ok(())
    }

    #[cfg_attr(not(test), allow(dead_code))]
    pub fn parse(text: &str) -> Result<Self, String> {
        let mut c = Self::default();
        c.apply_text(text)?;
        Ok(c)
    }

    pub fn to_text(&self) -> String {
        let p = &self.pipeline;
        let mut out = format!(
            "s0 = {}\nanchors = {}\nsigma_h = {}\ntheta = {}\niters = {}\ntau = {}\nfine_tau = {}\nwindow = {}\nseed = {}\nuse_anchors = {}\nuse_bands = {}\npose_iterations = {}\npose_threshold = {}\n",
            p.s0,
            p.anchors,
            p.sigma_h,
            p.theta,
            p.iterations,
            p.tau,
            p.fine_tau,
            p.window,
            p.seed,
            p.use_anchors,
            p.use_bands,
            p.pose_iterations,
            p.pose_threshold_cells
        );
        let paths = [
            ("ref", &self.ref_input),
            ("src", &self.src_input),
            ("cam_ref", &self.cam_ref),
            ("cam_src", &self.cam_src),
            ("params", &self.params),
            ("gt", &self.gt),
            ("pose_gt", &self.pose_gt),
            ("out", &self.out),
        ];
        for (k, v) in paths {
            if let Some(v) = v {
                out.push_str(&format!("{k} = {}\n", v.display()));
            }
        }
        out
    }
}
