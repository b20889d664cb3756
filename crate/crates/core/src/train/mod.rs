//! Joint optimisation of the template, the velocity stack and the latent table.

mod adam;
mod checkpoint;
mod config;

pub use adam::AdamState;
pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, CHECKPOINT_VERSION,
};
pub use config::{McCounts, Precision, TrainConfig};

use rand::seq::index;
use rand::seq::SliceRandom;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Domain, ShapeRecord};
use crate::loss::{batch_objective, Batch, Fidelity, LossBreakdown, ShapeDraw, TermCoefficients};
use crate::network::{TemplateNet, VelocityNetStack};
use crate::rng;

const STREAM_TEMPLATE: u64 = 0x7E11;
const STREAM_VELOCITY: u64 = 0x7E12;
const STREAM_LATENT: u64 = 0x7E13;
const STREAM_SHUFFLE: u64 = 0x5F1E;
const STREAM_DRAW: u64 = 0xD7A3;
const STREAM_EIKONAL: u64 = 0xE1C0;

/// Per-shape latent codes, one row of `d_z` values per training shape.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatentTable {
    pub d_z: usize,
    pub codes: Vec<f64>,
}

impl LatentTable {
    pub fn zeros(count: usize, d_z: usize) -> Self {
        Self {
            d_z,
            codes: vec![0.0; count * d_z],
        }
    }

    /// Codes drawn i.i.d. from `N(0, 1/d_z)`, then projected into the unit ball.
    pub fn gaussian(count: usize, d_z: usize, rng: &mut rng::Rng) -> Self {
        let normal = Normal::new(0.0, 1.0 / (d_z as f64).sqrt()).expect("positive stddev");
        let codes = (0..count * d_z).map(|_| normal.sample(rng)).collect();
        let mut t = Self { d_z, codes };
        t.project();
        t
    }

    pub fn len(&self) -> usize {
        self.codes.len() / self.d_z
    }

    pub fn is_empty(&self) -> bool {
        self.codes.is_empty()
    }

    pub fn get(&self, i: usize) -> &[f64] {
        &self.codes[i * self.d_z..(i + 1) * self.d_z]
    }

    /// Radially rescales every code with norm above one onto the unit sphere.
    pub fn project(&mut self) {
        for z in self.codes.chunks_exact_mut(self.d_z) {
            let mut n = z.iter().map(|v| v * v).sum::<f64>().sqrt();
            // rounding can leave the rescaled norm an ulp above one
            let mut shrink = 1.0;
            while n > 1.0 {
                z.iter_mut().for_each(|v| *v *= shrink / n);
                n = z.iter().map(|v| v * v).sum::<f64>().sqrt();
                shrink -= f64::EPSILON;
            }
        }
    }

    pub fn max_norm(&self) -> f64 {
        self.codes
            .chunks_exact(self.d_z)
            .map(|z| z.iter().map(|v| v * v).sum::<f64>().sqrt())
            .fold(0.0, f64::max)
    }
}

/// Template plus velocity stack.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub template: TemplateNet,
    pub velocity: VelocityNetStack,
}

impl Model {
    pub fn dim(&self) -> usize {
        self.template.dim()
    }
}

/// Everything needed to continue a run.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub config: TrainConfig,
    pub model: Model,
    pub latents: LatentTable,
    /// Latent, template and velocity optimisers, in that order.
    pub adam: [AdamState; 3],
    /// Completed epochs.
    pub epoch: usize,
}

/// Builds the architecture described by `config` with all parameters zero.
pub fn zero_model(config: &TrainConfig) -> Result<Model> {
    Ok(Model {
        template: TemplateNet::zeros(config.dim, config.d_mu, config.n_hidden)?,
        velocity: VelocityNetStack::zeros(
            config.dim,
            config.d_z,
            config.d_vel,
            config.vel_hidden,
            config.stages,
            Some(config.eps),
        )?,
    })
}

/// Radius of the initial template's zero level set.
pub const SPHERE_RADIUS: f64 = 0.5;
const SPHERE_FIT_STEPS: usize = 300;
const SPHERE_FIT_POINTS: usize = 256;

/// Geometric initialisation refined by regressing `r − ‖x‖` for a few
/// hundred Adam steps, so that narrow networks also start from a sphere.
pub fn sphere_template(
    dim: usize,
    width: usize,
    n_hidden: usize,
    rng: &mut rng::Rng,
) -> Result<TemplateNet> {
    let mut net = TemplateNet::geometric(dim, width, n_hidden, rng)?;
    let domain = Domain::new(dim)?;
    let mut adam = AdamState::new(net.param_count());
    let clamp = TemplateNet::CLAMP;
    for step in 0..SPHERE_FIT_STEPS {
        let mut pts = domain.sample_uniform(rng, SPHERE_FIT_POINTS / 2);
        // half the batch in a shell around the target surface
        for _ in 0..SPHERE_FIT_POINTS / 2 {
            let dir: Vec<f64> = (0..dim)
                .map(|_| Normal::new(0.0, 1.0).expect("unit normal").sample(rng))
                .collect();
            let n = dir.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
            let r = SPHERE_RADIUS + 0.1 * (2.0 * rand::Rng::random::<f64>(rng) - 1.0);
            pts.extend(dir.iter().map(|v| r * v / n));
        }
        let values = net.values(&pts)?;
        let count = values.len() as f64;
        let cot: Vec<f64> = values
            .iter()
            .zip(pts.chunks_exact(dim))
            .map(|(f, x)| {
                let target = (SPHERE_RADIUS - x.iter().map(|v| v * v).sum::<f64>().sqrt())
                    .clamp(-clamp, clamp);
                2.0 * (f - target) / count
            })
            .collect();
        let g = net.backprop(&pts, &cot, &vec![0.0; pts.len()])?;
        let lr = if step < SPHERE_FIT_STEPS / 2 {
            1e-3
        } else {
            2e-4
        };
        adam.update(&mut net.params, &g.data, lr)?;
    }
    Ok(net)
}

pub fn init_run(config: &TrainConfig, dataset: &[ShapeRecord]) -> Result<TrainState> {
    config.validate()?;
    if dataset.is_empty() {
        return Err(Error::Empty("dataset"));
    }
    if config.batch_size > dataset.len() {
        return Err(Error::invalid(format!(
            "batch_size {} exceeds dataset size {}",
            config.batch_size,
            dataset.len()
        )));
    }
    if let Some(r) = dataset.iter().find(|r| r.spec.dim() != config.dim) {
        return Err(Error::ShapeMismatch(format!(
            "shape {} has dimension {}, config expects {}",
            r.sample.shape_id,
            r.spec.dim(),
            config.dim
        )));
    }
    let template = sphere_template(
        config.dim,
        config.d_mu,
        config.n_hidden,
        &mut rng::stream(config.seed, &[STREAM_TEMPLATE]),
    )?;
    let velocity = VelocityNetStack::uniform(
        config.dim,
        config.d_z,
        config.d_vel,
        config.vel_hidden,
        config.stages,
        Some(config.eps),
        &mut rng::stream(config.seed, &[STREAM_VELOCITY]),
    )?;
    let latents = LatentTable::gaussian(
        dataset.len(),
        config.d_z,
        &mut rng::stream(config.seed, &[STREAM_LATENT]),
    );
    let adam = [
        AdamState::new(latents.codes.len()),
        AdamState::new(template.param_count()),
        AdamState::new(velocity.param_count()),
    ];
    Ok(TrainState {
        config: config.clone(),
        model: Model { template, velocity },
        latents,
        adam,
        epoch: 0,
    })
}

/// Shape order for one epoch.
pub fn epoch_order(seed: u64, epoch: usize, count: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..count).collect();
    order.shuffle(&mut rng::stream(seed, &[STREAM_SHUFFLE, epoch as u64]));
    order
}

/// Balanced inside/outside labelled points; falls back to uniform draws if
/// one class is too rare to fill within the attempt budget.
fn occupancy_draw(record: &ShapeRecord, n: usize, rng: &mut rng::Rng) -> (Vec<f64>, Vec<f64>) {
    let domain = Domain::new(record.spec.dim()).expect("validated dimension");
    let d = domain.dim();
    let want_in = n / 2;
    let want_out = n - want_in;
    let (mut inside, mut outside) = (Vec::new(), Vec::new());
    for _ in 0..64 {
        for p in domain.sample_uniform(rng, n).chunks_exact(d) {
            let bucket = if record.spec.occupancy(p) > 0.5 {
                &mut inside
            } else {
                &mut outside
            };
            bucket.extend_from_slice(p);
        }
        if inside.len() >= want_in * d && outside.len() >= want_out * d {
            break;
        }
    }
    let take_in = (inside.len() / d).min(want_in);
    let take_out = (outside.len() / d).min(n - take_in);
    let mut points = inside[..take_in * d].to_vec();
    points.extend_from_slice(&outside[..take_out * d]);
    let mut labels = vec![1.0; take_in];
    labels.resize(take_in + take_out, 0.0);
    (points, labels)
}

/// Monte Carlo draws for one shape, keyed by `(seed, epoch, shape)` so they
/// do not depend on batch composition.
pub fn draw_shape(
    config: &TrainConfig,
    record: &ShapeRecord,
    shape: usize,
    z: &[f64],
    epoch: usize,
) -> ShapeDraw {
    let mut rng = rng::stream(config.seed, &[STREAM_DRAW, epoch as u64, shape as u64]);
    let d = config.dim;
    let sample = &record.sample;
    let surface = if config.mc.surface < sample.len() {
        let mut idx = index::sample(&mut rng, sample.len(), config.mc.surface).into_vec();
        idx.sort_unstable();
        sample.select(&idx)
    } else {
        sample.clone()
    };
    let domain = Domain::new(d).expect("validated dimension");
    let domain_points = domain.sample_uniform(&mut rng, config.mc.domain);
    let occupancy = (config.fidelity == Fidelity::Occupancy)
        .then(|| occupancy_draw(record, config.mc.occupancy, &mut rng));
    ShapeDraw {
        shape,
        z: z.to_vec(),
        surface_points: surface.points.coords,
        normals: surface.normals,
        domain_points,
        occupancy,
    }
}

/// Assembles the batch for positions `batch_index` of the epoch order.
pub fn build_batch(
    state: &TrainState,
    dataset: &[ShapeRecord],
    shapes: &[usize],
    batch_index: usize,
) -> Batch {
    let cfg = &state.config;
    let draws = shapes
        .iter()
        .map(|&i| draw_shape(cfg, &dataset[i], i, state.latents.get(i), state.epoch))
        .collect();
    let mut rng = rng::stream(
        cfg.seed,
        &[STREAM_EIKONAL, state.epoch as u64, batch_index as u64],
    );
    Batch {
        shapes: draws,
        eikonal_points: Domain::new(cfg.dim)
            .expect("validated dimension")
            .sample_uniform(&mut rng, cfg.mc.eikonal),
    }
}

fn check_gradients(name: &str, g: &[f64]) -> Result<()> {
    if g.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(format!("{name} gradient")))
    }
}

/// One pass over the dataset. Returns the mean breakdown over batches.
pub fn train_epoch(state: &mut TrainState, dataset: &[ShapeRecord]) -> Result<LossBreakdown> {
    if dataset.len() != state.latents.len() {
        return Err(Error::ShapeMismatch(format!(
            "dataset has {} shapes, latent table has {}",
            dataset.len(),
            state.latents.len()
        )));
    }
    let cfg = state.config.clone();
    let coeffs = TermCoefficients::new(&cfg.weights, cfg.mode, cfg.fidelity);
    let [lr_z, lr_t, lr_v] = cfg.learning_rates(state.epoch);
    let order = epoch_order(cfg.seed, state.epoch, dataset.len());
    let batches: Vec<&[usize]> = order.chunks(cfg.batch_size).collect();
    let mut mean = LossBreakdown::default();
    for (b, shapes) in batches.iter().enumerate() {
        let batch = build_batch(state, dataset, shapes, b);
        let (terms, grads) = batch_objective(
            &state.model.template,
            &state.model.velocity,
            &batch,
            &coeffs,
            true,
        )?;
        let grads = grads.expect("gradients requested");
        check_gradients("template", &grads.template.data)?;
        check_gradients("velocity", &grads.velocity.data)?;
        let d_z = cfg.d_z;
        let mut gz = vec![0.0; state.latents.codes.len()];
        for (i, g) in &grads.latents {
            check_gradients("latent", g)?;
            for (dst, src) in gz[i * d_z..(i + 1) * d_z].iter_mut().zip(g) {
                *dst += src;
            }
        }
        let [a_z, a_t, a_v] = &mut state.adam;
        a_z.update(&mut state.latents.codes, &gz, lr_z)?;
        a_t.update(&mut state.model.template.params, &grads.template.data, lr_t)?;
        a_v.update(&mut state.model.velocity.params, &grads.velocity.data, lr_v)?;
        state.latents.project();
        mean.add_scaled(&terms, 1.0 / batches.len() as f64);
    }
    state.epoch += 1;
    Ok(mean)
}

/// Trains until `state.epoch == until`, appending one CSV row per epoch.
pub fn train_until(
    state: &mut TrainState,
    dataset: &[ShapeRecord],
    until: usize,
    mut on_epoch: impl FnMut(&TrainState, &LossBreakdown) -> Result<()>,
) -> Result<Vec<LossBreakdown>> {
    let mut history = Vec::new();
    while state.epoch < until {
        let terms = train_epoch(state, dataset)?;
        on_epoch(state, &terms)?;
        history.push(terms);
    }
    Ok(history)
}
