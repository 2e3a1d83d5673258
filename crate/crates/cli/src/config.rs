//! Run configuration: line-oriented `key = value` text with dotted
//! sections. Every field has a default, unknown keys are rejected, and the
//! echo written into a run directory parses back to the same config.

use qsr_core::diffgraph::OptimizerKind;
use qsr_core::error::{Error, Result};
use qsr_core::losses::LossWeights;
use qsr_core::plants;
use qsr_core::trainer::TrainConfig;
use qsr_core::Plant;
use std::collections::BTreeMap;

#[derive(Debug, Clone)]
pub struct RunConfig {
    pub plant_name: String,
    pub plant_params: BTreeMap<String, f64>,
    /// None = per-plant default width.
    pub hidden: Option<usize>,
    pub mu: f64,
    pub nu: f64,
    pub w1: f64,
    pub w2: f64,
    pub w3: f64,
    pub w4: f64,
    pub w5: f64,
    pub margin: f64,
    pub u_box: f64,
    pub pgd_alpha: f64,
    pub pgd_steps: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    pub outer_iters: usize,
    pub batch: usize,
    pub init_samples: usize,
    pub samples_per_iter: usize,
    pub verify_every: usize,
    pub eps_origin: f64,
    pub optimizer: OptimizerKind,
    pub seed: u64,
    pub delta: f64,
    pub budget: u64,
    pub sim_h: f64,
    pub sim_t_final: f64,
    pub sim_trials: usize,
    pub sim_conv_tol: f64,
    pub sim_paper_sum: bool,
    pub out_dir: String,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            plant_name: "circuit".into(),
            plant_params: BTreeMap::new(),
            hidden: None,
            mu: 0.1,
            nu: 10.0,
            w1: 1.0,
            w2: 1.0,
            w3: 1.0,
            w4: 1.0,
            w5: 0.1,
            margin: 2e-3,
            u_box: 1.0,
            pgd_alpha: 0.05,
            pgd_steps: 10,
            learning_rate: 1e-3,
            epochs: 200,
            outer_iters: 60,
            batch: 0,
            init_samples: 500,
            samples_per_iter: 100,
            verify_every: 5,
            eps_origin: 1e-2,
            optimizer: OptimizerKind::Adam,
            seed: 0,
            delta: 1e-3,
            budget: 2_000_000,
            sim_h: 1e-2,
            sim_t_final: 20.0,
            sim_trials: 30,
            sim_conv_tol: 1e-2,
            sim_paper_sum: false,
            out_dir: "runs".into(),
        }
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse::<T>()
        .map_err(|_| Error::Parse(format!("bad value '{value}' for key {key}")))
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "plant.name" => self.plant_name = value.to_string(),
            k if k.starts_with("plant.param.") => {
                let name = &k["plant.param.".len()..];
                self.plant_params.insert(name.to_string(), parse_num(key, value)?);
            }
            "net.hidden" => {
                self.hidden =
                    if value == "auto" { None } else { Some(parse_num(key, value)?) };
            }
            "cert.mu" => self.mu = parse_num(key, value)?,
            "cert.nu" => self.nu = parse_num(key, value)?,
            "loss.w1" => self.w1 = parse_num(key, value)?,
            "loss.w2" => self.w2 = parse_num(key, value)?,
            "loss.w3" => self.w3 = parse_num(key, value)?,
            "loss.w4" => self.w4 = parse_num(key, value)?,
            "loss.w5" => self.w5 = parse_num(key, value)?,
            "loss.margin" => self.margin = parse_num(key, value)?,
            "loss.u_box" => self.u_box = parse_num(key, value)?,
            "train.pgd_alpha" => self.pgd_alpha = parse_num(key, value)?,
            "train.pgd_steps" => self.pgd_steps = parse_num(key, value)?,
            "train.learning_rate" => self.learning_rate = parse_num(key, value)?,
            "train.epochs" => self.epochs = parse_num(key, value)?,
            "train.outer_iters" => self.outer_iters = parse_num(key, value)?,
            "train.batch" => self.batch = parse_num(key, value)?,
            "train.init_samples" => self.init_samples = parse_num(key, value)?,
            "train.samples_per_iter" => self.samples_per_iter = parse_num(key, value)?,
            "train.verify_every" => self.verify_every = parse_num(key, value)?,
            "train.eps_origin" => self.eps_origin = parse_num(key, value)?,
            "train.optimizer" => {
                self.optimizer = match value {
                    "adam" => OptimizerKind::Adam,
                    "sgd" => OptimizerKind::Sgd,
                    other => {
                        return Err(Error::Parse(format!(
                            "train.optimizer must be adam or sgd, got {other}"
                        )))
                    }
                };
            }
            "train.seed" => self.seed = parse_num(key, value)?,
            "verify.delta" => self.delta = parse_num(key, value)?,
            "verify.budget" => self.budget = parse_num(key, value)?,
            "sim.h" => self.sim_h = parse_num(key, value)?,
            "sim.t_final" => self.sim_t_final = parse_num(key, value)?,
            "sim.trials" => self.sim_trials = parse_num(key, value)?,
            "sim.conv_tol" => self.sim_conv_tol = parse_num(key, value)?,
            "sim.paper_sum" => self.sim_paper_sum = parse_num(key, value)?,
            "out.dir" => self.out_dir = value.to_string(),
            other => return Err(Error::Parse(format!("unknown config key: {other}"))),
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<RunConfig> {
        let mut cfg = RunConfig::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Parse(format!("line {}: expected 'key = value'", lineno + 1))
            })?;
            cfg.set(key.trim(), value.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &std::path::Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path)?;
        let cfg = Self::parse(&text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.plant()?;
        self.loss_weights().validate()?;
        self.train_config().validate()?;
        if self.sim_h <= 0.0 || self.sim_t_final <= 0.0 {
            return Err(Error::contract("sim.h and sim.t_final must be positive"));
        }
        Ok(())
    }

    /// Text echo of every field; parses back to an identical config.
    pub fn echo(&self) -> String {
        let mut s = String::new();
        let mut push = |k: &str, v: String| {
            s.push_str(k);
            s.push_str(" = ");
            s.push_str(&v);
            s.push('\n');
        };
        push("plant.name", self.plant_name.clone());
        for (k, v) in &self.plant_params {
            push(&format!("plant.param.{k}"), format!("{v}"));
        }
        push("net.hidden", self.hidden.map_or("auto".into(), |h| h.to_string()));
        push("cert.mu", format!("{}", self.mu));
        push("cert.nu", format!("{}", self.nu));
        push("loss.w1", format!("{}", self.w1));
        push("loss.w2", format!("{}", self.w2));
        push("loss.w3", format!("{}", self.w3));
        push("loss.w4", format!("{}", self.w4));
        push("loss.w5", format!("{}", self.w5));
        push("loss.margin", format!("{}", self.margin));
        push("loss.u_box", format!("{}", self.u_box));
        push("train.pgd_alpha", format!("{}", self.pgd_alpha));
        push("train.pgd_steps", format!("{}", self.pgd_steps));
        push("train.learning_rate", format!("{}", self.learning_rate));
        push("train.epochs", format!("{}", self.epochs));
        push("train.outer_iters", format!("{}", self.outer_iters));
        push("train.batch", format!("{}", self.batch));
        push("train.init_samples", format!("{}", self.init_samples));
        push("train.samples_per_iter", format!("{}", self.samples_per_iter));
        push("train.verify_every", format!("{}", self.verify_every));
        push("train.eps_origin", format!("{}", self.eps_origin));
        push(
            "train.optimizer",
            match self.optimizer {
                OptimizerKind::Adam => "adam".into(),
                OptimizerKind::Sgd => "sgd".into(),
            },
        );
        push("train.seed", format!("{}", self.seed));
        push("verify.delta", format!("{}", self.delta));
        push("verify.budget", format!("{}", self.budget));
        push("sim.h", format!("{}", self.sim_h));
        push("sim.t_final", format!("{}", self.sim_t_final));
        push("sim.trials", format!("{}", self.sim_trials));
        push("sim.conv_tol", format!("{}", self.sim_conv_tol));
        push("sim.paper_sum", format!("{}", self.sim_paper_sum));
        push("out.dir", self.out_dir.clone());
        s
    }

    pub fn plant(&self) -> Result<Plant> {
        check_plant_params(&self.plant_name, &self.plant_params)?;
        plants::by_name(&self.plant_name, &self.plant_params)
    }

    /// Benchmark network widths: 8 for the 2-state plants, 20 for the rod
    /// on a cart, 32 for the dynamic pendulum.
    pub fn hidden_width(&self) -> usize {
        self.hidden.unwrap_or(match self.plant_name.as_str() {
            "pendulum-dynamic" => 32,
            "rodcart" => 20,
            "integrator" => 4,
            _ => 8,
        })
    }

    pub fn loss_weights(&self) -> LossWeights {
        LossWeights {
            dissipativity: self.w1,
            storage: self.w2,
            delta: self.w3,
            r_pd: self.w4,
            shaping: self.w5,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            pgd_alpha: self.pgd_alpha,
            pgd_steps: self.pgd_steps,
            learning_rate: self.learning_rate,
            epochs: self.epochs,
            outer_iters: self.outer_iters,
            batch_size: self.batch,
            seed: self.seed,
            verify_every: self.verify_every,
            eps_origin: self.eps_origin,
            init_samples: self.init_samples,
            samples_per_iter: self.samples_per_iter,
            margin: self.margin,
            optimizer: self.optimizer,
            verifier_delta: self.delta,
            verifier_budget: self.budget,
            hidden: self.hidden_width(),
            mu: self.mu,
            nu: self.nu,
        }
    }
}

fn check_plant_params(name: &str, params: &BTreeMap<String, f64>) -> Result<()> {
    let known: &[&str] = match name {
        "circuit" => &["resistance", "inductance", "capacitance"],
        "pendulum" => &["gravity", "damping", "mass", "length"],
        "pendulum-dynamic" => &["gravity", "damping", "mass", "length", "xc_bound"],
        "rodcart" => &["cart_mass", "tip_mass", "stiffness", "damping"],
        "integrator" => &[],
        _ => &[],
    };
    for key in params.keys() {
        if !known.contains(&key.as_str()) {
            return Err(Error::Parse(format!(
                "unknown config key: plant.param.{key} (for plant {name})"
            )));
        }
    }
    Ok(())
}
