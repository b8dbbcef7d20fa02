use std::fs;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use clap::ArgMatches;
use log::info;
use pointillist::ar::{ArModel, Condition};
use pointillist::cloud::{read_bpc, write_bpc, BoundPointCloud};
use pointillist::codec::{
    self, decode_lenient, read_tok, read_tok_text, write_tok, write_tok_text, TokenSequence, Vocabulary, GROUP,
};
use pointillist::config::RunConfig;
use pointillist::decoder::GaussianDecoder;
use pointillist::gaussian::{read_gau, write_gau, Gaussian};
use pointillist::image::{read_img, write_img, write_ppm, Image};
use pointillist::losses::{l1_loss, psnr, ssim, MetricsReport};
use pointillist::nn::{read_checkpoint, write_checkpoint};
use pointillist::pipeline::{self, condition, spearman, ViewSelection};
use pointillist::render::{render as splat, RenderOptions};
use pointillist::rig::build_template;
use pointillist::synth::{build_dataset, pose_gaussians, view_name, Dataset, Split};

use crate::Invalid;

fn path<'a>(m: &'a ArgMatches, id: &str) -> Result<&'a PathBuf> {
    m.get_one::<PathBuf>(id)
        .ok_or_else(|| anyhow!(Invalid(format!("missing --{id}"))))
}

fn create(path: &Path) -> Result<BufWriter<fs::File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    let file = fs::File::create(path).with_context(|| format!("creating {}", path.display()))?;
    Ok(BufWriter::new(file))
}

fn write_with(path: &Path, body: impl FnOnce(&mut BufWriter<fs::File>) -> pointillist::Result<()>) -> Result<()> {
    let mut out = create(path)?;
    body(&mut out).with_context(|| format!("writing {}", path.display()))?;
    out.flush().with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

fn open(path: &Path) -> Result<BufReader<fs::File>> {
    let file = fs::File::open(path).with_context(|| format!("opening {}", path.display()))?;
    Ok(BufReader::new(file))
}

fn read_tokens(path: &Path) -> Result<TokenSequence> {
    let mut bytes = Vec::new();
    open(path)?
        .read_to_end(&mut bytes)
        .with_context(|| format!("reading {}", path.display()))?;
    let seq = if bytes.starts_with(b"TOK1") {
        read_tok(&bytes[..])
    } else {
        read_tok_text(&bytes[..])
    };
    seq.with_context(|| format!("parsing {}", path.display()))
}

fn load_ar(path: &Path) -> Result<ArModel<f32>> {
    let ckpt = read_checkpoint(open(path)?).with_context(|| format!("reading {}", path.display()))?;
    ArModel::from_checkpoint(&ckpt).with_context(|| format!("loading {}", path.display()))
}

fn load_decoder(path: &Path) -> Result<GaussianDecoder<f32>> {
    let ckpt = read_checkpoint(open(path)?).with_context(|| format!("reading {}", path.display()))?;
    GaussianDecoder::from_checkpoint(&ckpt).with_context(|| format!("loading {}", path.display()))
}

/// Opens the dataset and checks that it matches the configuration.
fn dataset(cfg: &RunConfig) -> Result<Dataset> {
    let root = cfg.data_root();
    let ds = Dataset::open(&root).with_context(|| format!("opening dataset {}", root.display()))?;
    let m = &ds.manifest;
    if m.coord_levels != cfg.synth.coord_levels || m.faces != cfg.template.faces || m.image_size != cfg.synth.image_size
    {
        bail!(Invalid(format!(
            "dataset {} (levels {}, faces {}, image {}) disagrees with the configuration (levels {}, faces {}, image {})",
            root.display(),
            m.coord_levels,
            m.faces,
            m.image_size,
            cfg.synth.coord_levels,
            cfg.template.faces,
            cfg.synth.image_size
        )));
    }
    Ok(ds)
}

fn check_ar(ar: &ArModel<f32>, ds: &Dataset) -> Result<()> {
    if ar.cfg.vocab() != ds.vocab() || ar.cfg.image_size != ds.manifest.image_size {
        bail!(Invalid("the AR checkpoint was trained for a different vocabulary or image size".into()));
    }
    Ok(())
}

pub fn synth(cfg: &RunConfig) -> Result<()> {
    let t = &cfg.template;
    let tpl = build_template::<f64>(t.seed, t.faces, t.joints, t.expressions)?;
    if tpl.num_faces() != t.faces {
        bail!(Invalid(format!(
            "template.faces must be 20·4^k; {} would build {} faces",
            t.faces,
            tpl.num_faces()
        )));
    }
    let root = cfg.data_root();
    info!("generating {} identities under {}", cfg.data.identities, root.display());
    let m = build_dataset(&root, &cfg.seeds(), &tpl, &cfg.synth, cfg.threads)?;
    let points: Vec<usize> = m.entries.iter().map(|e| e.points).collect();
    info!(
        "wrote {} train / {} test identities, {}..{} points",
        m.seeds(Split::Train).len(),
        m.seeds(Split::Test).len(),
        points.iter().min().unwrap_or(&0),
        points.iter().max().unwrap_or(&0)
    );
    Ok(())
}

pub fn encode(cfg: &RunConfig, m: &ArgMatches) -> Result<()> {
    let (input, output) = (path(m, "input")?, path(m, "output")?);
    let (cloud, faces): (BoundPointCloud<f64>, usize) =
        read_bpc(open(input)?).with_context(|| format!("parsing {}", input.display()))?;
    let vocab = Vocabulary::new(cfg.synth.coord_levels, faces as u32);
    let seq = codec::encode(&cloud, &vocab).with_context(|| format!("encoding {}", input.display()))?;
    if m.get_flag("text") {
        write_with(output, |o| write_tok_text(o, &seq))?;
    } else {
        write_with(output, |o| write_tok(o, &seq))?;
    }
    info!("{} points -> {} tokens", cloud.len(), seq.len());
    Ok(())
}

pub fn decode(cfg: &RunConfig, m: &ArgMatches) -> Result<()> {
    let (input, output) = (path(m, "input")?, path(m, "output")?);
    let seq = read_tokens(input)?;
    let vocab = cfg.vocab();
    let cloud: BoundPointCloud<f64> =
        codec::decode(&seq, &vocab).with_context(|| format!("decoding {}", input.display()))?;
    write_with(output, |o| write_bpc(o, &cloud, vocab.face_count as usize, vocab.coord_levels))?;
    info!("{} tokens -> {} points", seq.len(), cloud.len());
    Ok(())
}

pub fn validate(cfg: &RunConfig, m: &ArgMatches) -> Result<()> {
    let input = path(m, "input")?;
    let seq = read_tokens(input)?;
    let report = codec::validate(&seq, &cfg.vocab());
    info!(
        "{}: {} tokens, {} points, {} padding, sorted={}",
        input.display(),
        seq.len(),
        report.points,
        report.padding,
        report.sorted
    );
    if let Some(v) = report.violations.first() {
        bail!(Invalid(format!(
            "{}: {} grammar violation(s); first at token {}: expected {}, found {}",
            input.display(),
            report.violations.len(),
            v.position,
            v.expected,
            v.found.map_or("end of sequence".to_string(), |t| t.to_string())
        )));
    }
    Ok(())
}

pub fn train_ar(cfg: &RunConfig, m: &ArgMatches) -> Result<()> {
    let out = path(m, "out")?;
    let ds = dataset(cfg)?;
    let seeds = ds.manifest.seeds(Split::Train);
    let items = pipeline::ar_items::<f32>(&ds, &seeds)?;
    let mut model = ArModel::<f32>::new(cfg.ar_config(), cfg.seed)?;
    info!(
        "training on {} identities, {} parameters, {} steps",
        items.len(),
        model.num_parameters(),
        cfg.train_ar.steps
    );
    let history = pipeline::train_ar(&mut model, &items, &cfg.train_ar, cfg.seed, cfg.threads)?;
    if let Some(l) = history.last() {
        info!("final step loss {l:.4} nats/token");
    }
    write_with(out, |o| write_checkpoint(o, &model.to_checkpoint()))?;
    info!("wrote {}", out.display());
    Ok(())
}

fn identity_seed(run: u64, identity: u64) -> u64 {
    run.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ identity
}

pub fn sample(cfg: &RunConfig, m: &ArgMatches) -> Result<()> {
    let out = path(m, "out")?;
    let ds = dataset(cfg)?;
    let mut ar = load_ar(path(m, "ar")?)?;
    check_ar(&ar, &ds)?;
    ar.cfg.temperature = cfg.ar.temperature;
    ar.cfg.top_k = cfg.ar.top_k;
    ar.cfg.constrained = cfg.ar.constrained;
    ar.cfg.max_points = cfg.ar.point_cap;
    let mut seeds: Vec<u64> = ds
        .manifest
        .entries
        .iter()
        .filter(|e| cfg.sample.split.admits(e.split))
        .map(|e| e.seed)
        .collect();
    if cfg.sample.limit > 0 {
        seeds.truncate(cfg.sample.limit);
    }
    let vocab = ds.vocab();
    let mut lines = Vec::new();
    let (mut grammatical, mut truncated) = (0, 0);
    for &seed in &seeds {
        let rec = ds.identity(seed)?;
        let gen = ar.sample(&condition(&ds, &rec), identity_seed(cfg.seed, seed))?;
        let report = codec::validate(&gen.sequence, &vocab);
        let (cloud, _) = decode_lenient::<f64>(&gen.sequence, &vocab);
        let dir = out.join(seed.to_string());
        write_with(&dir.join("tokens.tok"), |o| write_tok(o, &gen.sequence))?;
        write_with(&dir.join("cloud.bpc"), |o| {
            write_bpc(o, &cloud, vocab.face_count as usize, vocab.coord_levels)
        })?;
        grammatical += usize::from(report.is_grammatical());
        truncated += usize::from(gen.truncated);
        lines.push(format!(
            "seed={seed} points={} gt_points={} grammatical={} truncated={}",
            cloud.len(),
            rec.cloud.len(),
            report.is_grammatical(),
            gen.truncated
        ));
        info!("identity {seed}: {} points (ground truth {})", cloud.len(), rec.cloud.len());
    }
    let n = seeds.len().max(1) as f64;
    let mut summary = vec![
        format!("samples={}", seeds.len()),
        format!("grammatical={grammatical}"),
        format!("grammatical_rate={}", grammatical as f64 / n),
        format!("truncated={truncated}"),
        format!("constrained={}", cfg.ar.constrained),
    ];
    summary.extend(lines);
    let path = out.join("summary.txt");
    write_with(&path, |o| {
        for l in &summary {
            writeln!(o, "{l}")?;
        }
        Ok(())
    })?;
    info!("{grammatical}/{} grammatical; summary in {}", seeds.len(), path.display());
    Ok(())
}

pub fn train_decoder(cfg: &RunConfig, m: &ArgMatches) -> Result<()> {
    let Some(ar_path) = m.get_one::<PathBuf>("ar") else {
        bail!(Invalid(
            "train-decoder needs a frozen AR checkpoint (--ar); train it first with train-ar".into()
        ));
    };
    let out = path(m, "out")?;
    let ds = dataset(cfg)?;
    let ar = load_ar(ar_path)?;
    check_ar(&ar, &ds)?;
    let views = ViewSelection {
        cameras: cfg.views.train.clone(),
        frame: 0,
    };
    let uses_ar = cfg.decoder.variant.uses_ar();
    let items = ds
        .manifest
        .seeds(Split::Train)
        .iter()
        .map(|&s| {
            let rec = ds.identity(s)?;
            pipeline::decoder_item(&ds, &rec, uses_ar.then_some(&ar), &views, cfg.decoder.image_attention)
        })
        .collect::<pointillist::Result<Vec<_>>>()?;
    let mut dec = GaussianDecoder::<f32>::new(cfg.decoder.clone(), ar.cfg.d_model, ds.manifest.image_size, cfg.seed)?;
    info!(
        "training the {} decoder on {} identities, {} parameters, {} steps",
        cfg.decoder.variant,
        items.len(),
        dec.num_parameters(),
        cfg.train_decoder.steps
    );
    let history = pipeline::train_decoder(&mut dec, &items, &cfg.loss, &cfg.train_decoder, cfg.seed, cfg.threads)?;
    if let Some(l) = history.last() {
        info!("final step loss {l:.4}");
    }
    write_with(out, |o| write_checkpoint(o, &dec.to_checkpoint()))?;
    info!("wrote {}", out.display());
    Ok(())
}

/// Identity directories of a sample run, in seed order.
fn sample_dirs(root: &Path) -> Result<Vec<(u64, PathBuf)>> {
    let mut out = Vec::new();
    for e in fs::read_dir(root).with_context(|| format!("listing {}", root.display()))? {
        let e = e.with_context(|| format!("listing {}", root.display()))?;
        let p = e.path();
        if let Some(seed) = p.is_dir().then(|| p.file_name()?.to_str()?.parse::<u64>().ok()).flatten() {
            out.push((seed, p));
        }
    }
    out.sort();
    if out.is_empty() {
        bail!(Invalid(format!("{} holds no sample directories", root.display())));
    }
    Ok(out)
}

pub fn animate(cfg: &RunConfig, m: &ArgMatches) -> Result<()> {
    let root = path(m, "samples")?;
    let ds = dataset(cfg)?;
    let ar = load_ar(path(m, "ar")?)?;
    check_ar(&ar, &ds)?;
    let dec = load_decoder(path(m, "decoder")?)?;
    if dec.cfg.variant.uses_ar() && dec.ar_width != ar.cfg.d_model {
        bail!(Invalid("decoder and AR checkpoints disagree on the hidden width".into()));
    }
    let vocab = ds.vocab();
    for (seed, dir) in sample_dirs(root)? {
        let rec = ds.identity(seed)?;
        let seq = read_tokens(&dir.join("tokens.tok"))?;
        let (cloud, _) = decode_lenient::<f32>(&seq, &vocab);
        let cond: Condition<f32> = condition(&ds, &rec);
        let hidden = if dec.cfg.variant.uses_ar() {
            ar.hidden_states(&cond, &seq)?.slice_rows(0, GROUP * cloud.len())
        } else {
            pointillist::nn::Tensor::zeros(0, 0)
        };
        let image: Option<Image<f32>> = dec.cfg.image_attention.then(|| rec.cond.clone());
        let decoded = dec.decode(&cloud.positions(), &hidden, image.as_ref())?;
        let faces: Vec<u32> = cloud.points.iter().map(|p| p.binding).collect();
        write_with(&dir.join("gauss.gau"), |o| write_gau(o, &decoded.gaussians))?;
        for (frame, pe) in rec.track.iter().enumerate() {
            let posed = pose_gaussians(&decoded.gaussians, &faces, &ds.template, pe)?;
            write_with(&dir.join("frames").join(format!("{frame}.gau")), |o| write_gau(o, &posed))?;
        }
        info!("identity {seed}: {} Gaussians over {} frames", faces.len(), rec.track.len());
    }
    Ok(())
}

fn frame_files(dir: &Path) -> Result<Vec<(usize, PathBuf)>> {
    let frames = dir.join("frames");
    let mut out = Vec::new();
    for e in fs::read_dir(&frames).with_context(|| format!("listing {}", frames.display()))? {
        let p = e.with_context(|| format!("listing {}", frames.display()))?.path();
        let frame = p
            .file_name()
            .and_then(|n| n.to_str())
            .and_then(|n| n.strip_suffix(".gau"))
            .and_then(|n| n.parse::<usize>().ok());
        if let Some(f) = frame {
            out.push((f, p));
        }
    }
    out.sort();
    Ok(out)
}

pub fn render(cfg: &RunConfig, m: &ArgMatches) -> Result<()> {
    let root = path(m, "samples")?;
    let ds = dataset(cfg)?;
    let opts = RenderOptions {
        early_stop: true,
        threads: cfg.threads,
    };
    for (seed, dir) in sample_dirs(root)? {
        let frames = frame_files(&dir)?;
        if frames.is_empty() {
            bail!(Invalid(format!("{} has no posed frames; run animate first", dir.display())));
        }
        for (frame, file) in frames {
            let gs: Vec<Gaussian<f32>> =
                read_gau(open(&file)?).with_context(|| format!("parsing {}", file.display()))?;
            for (c, cam) in ds.cameras.iter().enumerate() {
                let img = splat(&gs, cam, opts).image;
                let stem = dir.join("renders").join(format!("{c}_{frame}"));
                write_with(&stem.with_extension("img1"), |o| write_img(o, &img))?;
                write_with(&stem.with_extension("ppm"), |o| write_ppm(o, &img))?;
            }
        }
        info!("identity {seed}: rendered");
    }
    Ok(())
}

pub fn eval(cfg: &RunConfig, m: &ArgMatches) -> Result<()> {
    let root = path(m, "samples")?;
    let out = path(m, "out")?;
    let ds = dataset(cfg)?;
    let vocab = ds.vocab();
    let (mut psnr_sum, mut l1_sum, mut ssim_sum, mut views) = (0.0, 0.0, 0.0, 0usize);
    let (mut gt_n, mut gen_n) = (Vec::new(), Vec::new());
    let mut grammatical = 0;
    let dirs = sample_dirs(root)?;
    for (seed, dir) in &dirs {
        let rec = ds.identity(*seed)?;
        let seq = read_tokens(&dir.join("tokens.tok"))?;
        let report = codec::validate(&seq, &vocab);
        grammatical += usize::from(report.is_grammatical());
        gt_n.push(rec.cloud.len() as f64);
        gen_n.push(report.points as f64);
        for (frame, _) in frame_files(dir)? {
            for &c in &cfg.views.eval {
                let file = dir.join("renders").join(view_name(c, frame));
                let img: Image<f32> = read_img(open(&file)?).with_context(|| format!("parsing {}", file.display()))?;
                let target: Image<f32> = ds.view(*seed, c, frame)?;
                psnr_sum += psnr(&img, &target)?;
                l1_sum += l1_loss(&img, &target)? as f64;
                ssim_sum += ssim(&img, &target)? as f64;
                views += 1;
            }
        }
    }
    if views == 0 {
        bail!(Invalid(format!("{} has no renders; run render first", root.display())));
    }
    let v = views as f64;
    let n = dirs.len() as f64;
    let mut report = MetricsReport::default();
    report.insert("identities", n);
    report.insert("views", v);
    report.insert("psnr", psnr_sum / v);
    report.insert("l1", l1_sum / v);
    report.insert("ssim", ssim_sum / v);
    report.insert("grammatical_rate", grammatical as f64 / n);
    report.insert("points_mean", gen_n.iter().sum::<f64>() / n);
    report.insert("gt_points_mean", gt_n.iter().sum::<f64>() / n);
    if dirs.len() >= 2 {
        report.insert("points_spearman", spearman(&gt_n, &gen_n)?);
    }
    write_with(out, |o| report.write(o))?;
    for (k, v) in &report.values {
        info!("{k}={v}");
    }
    Ok(())
}
