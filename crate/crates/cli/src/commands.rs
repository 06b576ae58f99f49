use std::collections::BTreeMap;
use std::path::Path;

use rayon::prelude::*;
use topogen::diffusion::{self, PiSource, SampleOptions, TrainItem, TrainOptions};
use topogen::geometry::{self, PointCloud};
use topogen::homology::PersistenceDiagram;
use topogen::io;
use topogen::metrics::{self, Distance};
use topogen::model::{ModelConfig, TopoDiT};
use topogen::pimage::{PersistenceImage, SigmaPolicy};
use topogen::pipeline::{self, ExtractOptions};
use topogen::rng;
use topogen::synth::{self, Shape};
use topogen::vae::{self, Vae, VaeConfig, VaeTrainOptions};

use crate::failure::{Failure, Result};
use crate::files::{self, ManifestEntry};
use crate::render;
use crate::{
    EvalArgs, ExtractArgs, PreprocessArgs, RasterizeArgs, SampleArgs, Schedule, ShowArgs, SynthArgs, TrainArgs,
    TrainVaeArgs,
};

pub fn synth(a: &SynthArgs) -> Result<()> {
    let shapes: Vec<Shape> =
        a.shapes.split(',').map(|s| s.trim().parse().map_err(Failure::bad_input)).collect::<Result<_>>()?;
    if shapes.is_empty() || a.count == 0 || a.points == 0 {
        return Err(Failure::bad_input("need at least one shape, cloud and point"));
    }
    for cloud in synth::dataset(&shapes, a.count, a.points, a.noise, a.seed) {
        let id = cloud.id().unwrap_or("cloud").to_string();
        files::write(&a.out.join(format!("{id}.xyz")), io::points_to_text(&cloud))?;
    }
    println!("wrote {} clouds to {}", a.count, a.out.display());
    Ok(())
}

pub fn preprocess(a: &PreprocessArgs) -> Result<()> {
    let clouds = files::read_cloud_dir(&a.input)?;
    if clouds.is_empty() {
        return Err(Failure::bad_input(format!("{}: no point-cloud files", a.input.display())));
    }
    let clouds: Vec<PointCloud> = clouds
        .into_iter()
        .map(|c| {
            let id = c.id().unwrap_or_default().to_string();
            if a.subsample == 0 {
                return c;
            }
            let idx = rng::sample_indices(&mut rng::stream(a.seed, &format!("subsample/{id}")), c.len(), a.subsample);
            c.select(&idx).with_id(id)
        })
        .collect();
    let (clouds, stats) = geometry::normalize(&clouds)?;
    let base = a.out.parent().unwrap_or(Path::new(""));
    let mut entries = Vec::with_capacity(clouds.len());
    for c in &clouds {
        let id = c.id().unwrap_or_default().to_string();
        let rel = format!("clouds/{id}.tpc");
        let bytes = io::points_to_binary(c);
        files::write(&base.join(&rel), &bytes)?;
        entries.push(ManifestEntry { id, path: rel, n_points: c.len(), hash: files::sha256_hex(&bytes) });
    }
    files::write(&a.out, files::manifest_to_csv(&entries))?;
    files::write(&files::norm_path(&a.out), files::norm_to_text(&stats))?;
    println!("{} clouds, mean {:?}, scale {}", entries.len(), stats.mean, stats.scale);
    Ok(())
}

pub fn extract(a: &ExtractArgs) -> Result<()> {
    let clouds = files::load_manifest_clouds(&a.manifest)?;
    let opts = ExtractOptions { landmarks: a.n_pd, max_dim: a.max_dim, cap: a.cap, seed: a.seed };
    if opts.landmarks == 0 {
        return Err(Failure::bad_input("--n-pd must be positive"));
    }
    let results: Vec<(pipeline::Landmarks, Vec<PersistenceDiagram>)> = clouds
        .par_iter()
        .map(|c| {
            let l = pipeline::landmarks(c, &opts)?;
            let pds = pipeline::landmark_diagrams(&l, &opts)?;
            Ok((l, pds))
        })
        .collect::<std::result::Result<_, pipeline::PipelineError>>()?;
    let mut summary: BTreeMap<usize, (usize, f64)> = BTreeMap::new();
    for (cloud, (l, pds)) in clouds.iter().zip(&results) {
        let id = cloud.id().unwrap_or_default();
        for pd in pds {
            let text = io::diagrams_to_csv(std::slice::from_ref(pd), l.cloud.len(), l.r_max);
            files::write(&a.out.join(format!("{id}.h{}.csv", pd.dimension)), text)?;
            let entry = summary.entry(pd.dimension).or_insert((0, 0.0));
            entry.0 += pd.pairs.len();
            entry.1 = entry.1.max(pd.max_persistence().unwrap_or(0.0));
        }
    }
    let mut s = String::from("dim,pairs,b_max\n");
    for (dim, (pairs, b_max)) in &summary {
        s.push_str(&format!("{dim},{pairs},{b_max}\n"));
    }
    files::write(&a.out.join("summary.csv"), &s)?;
    print!("{} clouds\n{s}", clouds.len());
    Ok(())
}

fn read_diagram(path: &Path) -> Result<PersistenceDiagram> {
    let file = io::parse_diagrams_csv(&files::read_text(path)?).map_err(|e| Failure::from(e).context(path.display()))?;
    // One diagram per file; rows of lower dimensions never appear.
    Ok(file.diagrams.into_iter().next_back().unwrap_or(PersistenceDiagram::empty(0)))
}

pub fn rasterize(a: &RasterizeArgs) -> Result<()> {
    if a.resolution == 0 || !(a.sigma > 0.0) || a.b_max.is_some_and(|b| !(b > 0.0)) {
        return Err(Failure::bad_input("resolution, sigma and b_max must be positive"));
    }
    let ids: Vec<String> = files::list(&a.diagrams, ".h1.csv")?.iter().map(|p| files::stem(p, ".h1.csv")).collect();
    if ids.is_empty() {
        return Err(Failure::bad_input(format!("{}: no *.h1.csv diagrams", a.diagrams.display())));
    }
    let load = |id: &str, dim: usize| -> Result<PersistenceDiagram> {
        let path = a.diagrams.join(format!("{id}.h{dim}.csv"));
        let mut pd = if path.exists() { read_diagram(&path)? } else { PersistenceDiagram::empty(dim) };
        pd.dimension = dim;
        Ok(pd)
    };
    let per_cloud: Vec<Vec<PersistenceDiagram>> =
        ids.iter().map(|id| Ok(vec![load(id, 1)?, load(id, 2)?])).collect::<Result<_>>()?;
    let mut specs = pipeline::dataset_specs(&per_cloud, a.resolution, SigmaPolicy::Fixed(a.sigma));
    if let Some(b) = a.b_max {
        specs.iter_mut().for_each(|s| s.b_max = b);
    }
    let images = pipeline::dataset_images(&per_cloud, &specs);
    for (id, (i1, i2)) in ids.iter().zip(&images) {
        files::write(&a.out.join(format!("{id}{}", files::PI_SUFFIXES[0])), io::image_to_bytes(i1, &specs[0]))?;
        files::write(&a.out.join(format!("{id}{}", files::PI_SUFFIXES[1])), io::image_to_bytes(i2, &specs[1]))?;
    }
    for (dim, s) in [1, 2].iter().zip(&specs) {
        let note = if s.defaulted { " (no pairs, unit grid)" } else { "" };
        println!("H{dim}: sigma {} b_max {:.6} birth {:?} pers {:?}{note}", s.sigma, s.b_max, s.birth_range, s.pers_range);
    }
    println!("wrote {} image pairs", ids.len());
    Ok(())
}

/// Step count, learning rate and batch from the flags or the given defaults.
fn resolve(s: &Schedule, items: usize, steps: usize, lr: f64, batch: usize) -> Result<(usize, f64, usize)> {
    let batch = s.batch.unwrap_or(batch);
    let lr = s.lr.unwrap_or(lr);
    let steps = match (s.steps, s.epochs) {
        (Some(n), _) => n,
        (None, Some(e)) => e * items.div_ceil(batch.max(1)),
        (None, None) => steps,
    };
    if batch == 0 || !(lr > 0.0 && lr.is_finite()) {
        return Err(Failure::bad_input("batch and lr must be positive"));
    }
    Ok((steps, lr, batch))
}

fn summarize(losses: &[f64]) {
    let avg = |s: &[f64]| s.iter().sum::<f64>() / s.len().max(1) as f64;
    let k = losses.len().min(10);
    println!("loss: first {} mean {:.6}, last {} mean {:.6}", k, avg(&losses[..k]), k, avg(&losses[losses.len() - k..]));
}

pub fn train_vae(a: &TrainVaeArgs) -> Result<()> {
    let pairs = files::read_image_dir(&a.images)?;
    let data: Vec<Vec<f64>> = pairs.iter().map(|p| vae::pair_row(&p.images.0, &p.images.1)).collect();
    let d = VaeTrainOptions::default();
    let (steps, lr, batch) = resolve(&a.schedule, data.len(), d.steps, d.lr, d.batch)?;
    let cfg = VaeConfig {
        pi_n: pairs[0].images.0.n,
        latent: a.latent,
        kl_weight: a.kl_weight,
        pixel_scale: vae::pixel_scale(&data),
        ..VaeConfig::default()
    };
    cfg.validate()?;
    let mut model = Vae::new(cfg, a.schedule.seed)?;
    let losses = vae::train(&mut model, &data, &VaeTrainOptions { steps, lr, batch }, a.schedule.seed)?;
    files::write_checkpoint(&a.out, model.config(), model.params())?;
    files::write(&a.out.join("losses.csv"), files::losses_csv(&losses))?;
    summarize(&losses);
    Ok(())
}

pub fn train(a: &TrainArgs) -> Result<()> {
    let mut cfg = if a.micro { ModelConfig::micro() } else { ModelConfig::default().with_size(a.size) };
    cfg.voxel = a.voxel.unwrap_or(cfg.voxel);
    cfg.patch = a.patch.unwrap_or(cfg.patch);
    cfg.queries = a.queries.unwrap_or(cfg.queries);
    for kv in &a.overrides {
        let (k, v) = kv.split_once('=').ok_or_else(|| Failure::bad_input(format!("--set expects key=value, got `{kv}`")))?;
        cfg.set(k.trim(), v.trim()).map_err(Failure::bad_input)?;
    }
    let clouds = files::load_manifest_clouds(&a.manifest)?;
    let mut images: BTreeMap<String, (PersistenceImage, PersistenceImage)> =
        files::read_image_dir(&a.images)?.into_iter().map(|p| (p.id, p.images)).collect();
    cfg.pi_n = images.values().next().map(|p| p.0.n).unwrap_or(cfg.pi_n);
    cfg.validate()?;
    let items: Vec<TrainItem> = clouds
        .into_iter()
        .map(|cloud| {
            let id = cloud.id().unwrap_or_default().to_string();
            let (pi1, pi2) = images.remove(&id).ok_or_else(|| Failure::bad_input(format!("no images for cloud `{id}`")))?;
            Ok(TrainItem { cloud, pi1, pi2 })
        })
        .collect::<Result<_>>()?;
    let d = TrainOptions::default();
    let (steps, lr, batch) = resolve(&a.schedule, items.len(), d.steps, d.lr, d.batch)?;
    let mut model = TopoDiT::new(cfg, a.schedule.seed)?;
    println!("{} parameters, {} clouds, {steps} steps", model.params().num_values(), items.len());
    let sched = diffusion::default_schedule();
    let every = a.log_every.max(1);
    let losses = diffusion::train(&mut model, &items, &sched, &TrainOptions { steps, lr, batch }, a.schedule.seed, |i, l| {
        if (i + 1) % every == 0 {
            println!("step {} loss {l:.6}", i + 1);
        }
    })?;
    files::write_checkpoint(&a.out, model.config(), model.params())?;
    files::write(&a.out.join("losses.csv"), files::losses_csv(&losses))?;
    summarize(&losses);
    Ok(())
}

fn load_model(dir: &Path) -> Result<TopoDiT> {
    let (text, params) = files::read_checkpoint(dir)?;
    Ok(TopoDiT::from_params(ModelConfig::parse(&text)?, params)?)
}

fn load_vae(dir: &Path) -> Result<Vae> {
    let (text, params) = files::read_checkpoint(dir)?;
    Ok(Vae::from_params(VaeConfig::parse(&text)?, params)?)
}

pub fn sample(a: &SampleArgs) -> Result<()> {
    let model = load_model(&a.model)?;
    let n = model.config().pi_n;
    let prior;
    let source = if let Some(dir) = &a.vae {
        prior = load_vae(dir)?;
        PiSource::Prior(&prior)
    } else if let (Some(dir), Some(id)) = (&a.images, &a.id) {
        let (i1, _) = files::read_image(&dir.join(format!("{id}{}", files::PI_SUFFIXES[0])))?;
        let (i2, _) = files::read_image(&dir.join(format!("{id}{}", files::PI_SUFFIXES[1])))?;
        PiSource::Fixed(i1, i2)
    } else if a.zero_pi {
        PiSource::Fixed(PersistenceImage::zeros(n, 1), PersistenceImage::zeros(n, 2))
    } else {
        return Err(Failure::bad_input("choose a conditioning source: --vae, --images with --id, or --zero-pi"));
    };
    if a.count == 0 || a.points == 0 {
        return Err(Failure::bad_input("--count and --points must be positive"));
    }
    let sched = diffusion::default_schedule();
    let opts = SampleOptions { steps: a.steps, variance: a.sigma_mode, clip: (a.clip > 0.0).then_some(a.clip) };
    for i in 0..a.count {
        let seed = rng::derive(a.seed, "sample", i as u64);
        let cloud = diffusion::sample(&model, &sched, Some(&source), a.points, &opts, seed)?;
        files::write(&a.out.join(format!("sample_{i:04}.xyz")), io::points_to_text(&cloud))?;
    }
    println!("wrote {} samples to {}", a.count, a.out.display());
    Ok(())
}

pub fn eval(a: &EvalArgs) -> Result<()> {
    let generated = files::read_cloud_dir(&a.generated)?;
    if generated.is_empty() {
        return Err(Failure::bad_input(format!("{}: no generated clouds", a.generated.display())));
    }
    let size = generated[0].len();
    if generated.iter().any(|c| c.len() != size) {
        return Err(Failure::bad_input("generated clouds differ in size"));
    }
    // Reference clouds are cut down to the generated size so EMD is defined.
    let reference: Vec<PointCloud> = files::load_manifest_clouds(&a.reference)?
        .into_iter()
        .map(|c| {
            let id = c.id().unwrap_or_default().to_string();
            let idx = rng::sample_indices(&mut rng::stream(a.seed, &format!("eval/{id}")), c.len(), size);
            c.select(&idx)
        })
        .collect();
    let mut rows = String::from("metric,distance,value\n");
    for name in a.distances.split(',').map(str::trim) {
        let d = match name {
            "cd" => Distance::Chamfer,
            "emd" => Distance::Emd,
            other => return Err(Failure::bad_input(format!("unknown distance `{other}` (cd, emd)"))),
        };
        let nna = metrics::one_nna(&generated, &reference, d)?;
        let cov = metrics::coverage(&generated, &reference, d)?;
        if !(nna.is_finite() && cov.is_finite()) {
            return Err(Failure { code: crate::failure::INVARIANT, msg: format!("non-finite {d} metrics") });
        }
        rows.push_str(&format!("1-NNA,{d},{nna}\nCOV,{d},{cov}\n"));
    }
    files::write(&a.out, &rows)?;
    print!("{rows}");
    Ok(())
}

pub fn show(a: &ShowArgs) -> Result<()> {
    let bytes = files::read(&a.input)?;
    if bytes.starts_with(b"TPI1") {
        let (img, _) = io::parse_image(&bytes)?;
        files::write(&a.out, render::image_pgm(&img))
    } else {
        let text = String::from_utf8(bytes).map_err(|_| Failure::bad_input("input is neither a TPI1 image nor text"))?;
        let file = io::parse_diagrams_csv(&text)?;
        files::write(&a.out, render::diagram_svg(&file))
    }
}
