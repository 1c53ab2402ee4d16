use std::collections::BTreeSet;
use std::io::Write;
use std::path::Path;

use anyhow::{bail, Context};
use fedkit::eval::{evaluate, EvalMode};
use fedkit::experts::{self, CategoryGroup};
use fedkit::io::{self, Prediction};
use fedkit::labels::{assign_rois, build_label_matrix, classification_loss, expand_verification};
use fedkit::training::{self, SamplerConfig, Schedule};
use fedkit::{ensemble, postprocess, BBox, Hierarchy};
use rayon::prelude::*;

use crate::files::{read, write_atomic};
use crate::{Command, Mode, SplitBy};

fn check_iou(t: f64) -> anyhow::Result<()> {
    if !(t > 0.0 && t <= 1.0) {
        return Err(
            fedkit::Error::InvalidArgument(format!("IoU threshold {t} outside (0, 1]")).into(),
        );
    }
    Ok(())
}

fn read_predictions(path: &Path) -> anyhow::Result<Vec<Prediction>> {
    read(path, io::parse_predictions)
}

fn write_predictions(path: &Path, preds: &[Prediction]) -> anyhow::Result<()> {
    write_atomic(path, |w| io::write_predictions(w, preds))
}

fn read_hierarchy(path: Option<&Path>) -> anyhow::Result<Hierarchy> {
    path.map_or_else(
        || Ok(Hierarchy::default()),
        |p| read(p, io::parse_hierarchy),
    )
}

fn read_group(path: &Path, index: usize) -> anyhow::Result<CategoryGroup> {
    let mut groups = read(path, io::parse_groups)?;
    if index >= groups.len() {
        return Err(fedkit::Error::InvalidArgument(format!(
            "group index {index} but {} has {} groups",
            path.display(),
            groups.len()
        ))
        .into());
    }
    Ok(groups.swap_remove(index))
}

/// Range checks that need no input files.
pub(crate) fn validate(cmd: &Command) -> anyhow::Result<()> {
    match cmd {
        Command::Nms(a) => check_iou(a.iou_threshold),
        Command::Ensemble(a) => check_iou(a.iou_threshold),
        Command::Assign(a) => check_iou(a.iou_threshold),
        Command::Eval(a) => check_iou(a.iou_threshold),
        Command::SampleRois(a) => Ok(SamplerConfig {
            n_sample: a.n_sample,
            fg_fraction: a.fg_fraction,
            fg_iou_threshold: a.fg_iou_threshold,
            seed: a.seed,
        }
        .validate()?),
        Command::Trim(a) if a.max_bytes < io::prediction_header_len() => {
            Err(fedkit::Error::InvalidArgument(format!(
                "budget of {} bytes is below the {}-byte header",
                a.max_bytes,
                io::prediction_header_len()
            ))
            .into())
        }
        Command::PartitionPool(a) if a.parts == 0 => {
            Err(fedkit::Error::InvalidArgument("partition count must be at least 1".into()).into())
        }
        Command::SplitExperts(a) if a.num_experts == 0 => {
            Err(fedkit::Error::InvalidArgument("at least one expert is required".into()).into())
        }
        Command::Lr(a) if a.total_steps == 0 => {
            Err(fedkit::Error::InvalidArgument("--total-steps must be at least 1".into()).into())
        }
        _ => Ok(()),
    }
}

/// Runs one non-pipeline command, writing any summary to `out`.
pub fn execute(cmd: &Command, out: &mut dyn Write) -> anyhow::Result<()> {
    validate(cmd)?;
    match cmd {
        Command::Nms(a) => {
            let preds = read_predictions(&a.input)?;
            write_predictions(&a.output, &ensemble::nms(&preds, a.iou_threshold))?;
        }
        Command::Ensemble(a) => {
            let sets = a
                .inputs
                .par_iter()
                .map(|p| read_predictions(p))
                .collect::<anyhow::Result<Vec<_>>>()?;
            write_predictions(&a.output, &ensemble::ensemble(&sets, a.iou_threshold)?)?;
        }
        Command::Assign(a) => {
            let pool = read(&a.rois, |r| io::parse_roi_pool(r, usize::MAX))?;
            let gts = read(&a.gt, io::parse_ground_truth)?;
            let v = read(&a.verification, io::parse_verification)?;
            let h = read_hierarchy(a.hierarchy.as_deref())?;
            let categories = match &a.categories {
                Some(p) => read(p, io::parse_category_list)?,
                None => {
                    let mut all: BTreeSet<&str> =
                        gts.iter().map(|g| g.category_id.as_str()).collect();
                    all.extend(v.categories());
                    all.extend(h.categories());
                    all.into_iter().map(str::to_owned).collect()
                }
            };
            let v = expand_verification(&v, &h)?;
            let rois: Vec<BBox> = pool
                .get(&a.image)
                .unwrap_or(&[])
                .iter()
                .map(|r| r.bbox)
                .collect();
            let image_gts: Vec<_> = gts.into_iter().filter(|g| g.image_id == a.image).collect();
            let assignment = assign_rois(&rois, &image_gts, a.iou_threshold);
            let m = build_label_matrix(&assignment, &image_gts, &v, &a.image, &categories)?;
            write_atomic(&a.output, |w| io::write_label_matrix(w, &m))?;
        }
        Command::Loss(a) => {
            let labels = read(&a.labels, io::parse_label_matrix)?;
            let logits = read(&a.logits, |r| io::parse_logits_for(r, &labels))?;
            writeln!(out, "{}", classification_loss(&logits, &labels)?)?;
        }
        Command::SampleRois(a) => {
            let pool = read(&a.rois, |r| io::parse_roi_pool(r, a.max_rois_per_image))?;
            let gts = read(&a.gt, io::parse_ground_truth)?;
            let cfg = SamplerConfig {
                n_sample: a.n_sample,
                fg_fraction: a.fg_fraction,
                fg_iou_threshold: a.fg_iou_threshold,
                seed: a.seed,
            };
            let sampled = training::sample_pool(&pool, &gts, &cfg)?;
            write_atomic(&a.output, |w| io::write_sampled(w, &sampled))?;
        }
        Command::PartitionPool(a) => {
            let pool = read(&a.rois, |r| io::parse_roi_pool(r, a.max_rois_per_image))?;
            let parts = training::partition_pool(&pool, a.parts)?;
            std::fs::create_dir_all(&a.output_dir)
                .with_context(|| format!("creating {}", a.output_dir.display()))?;
            for (j, part) in parts.iter().enumerate() {
                write_atomic(&a.output_dir.join(format!("part-{j}.csv")), |w| {
                    io::write_roi_pool(w, part)
                })?;
            }
        }
        Command::Lr(a) => {
            let schedule = match (a.batch_size, a.eta0) {
                (Some(b), _) => Schedule::from_batch_size(b)?,
                (None, Some(eta0)) => Schedule {
                    eta0,
                    batch_size: 0,
                },
                (None, None) => bail!("one of --batch-size or --eta0 is required"),
            };
            let steps: Vec<u64> = if a.steps.is_empty() {
                (0..=a.total_steps).collect()
            } else {
                a.steps.clone()
            };
            let mut table = String::from("step,progress,lr\n");
            for s in steps {
                let lr = schedule.at_step(s, a.total_steps)?;
                table.push_str(&format!("{s},{},{lr}\n", s as f64 / a.total_steps as f64));
            }
            match &a.output {
                Some(p) => write_atomic(p, |w| Ok(w.write_all(table.as_bytes())?))?,
                None => out.write_all(table.as_bytes())?,
            }
        }
        Command::SplitExperts(a) => {
            let groups = match a.by {
                SplitBy::Rank => {
                    let path = a
                        .stats
                        .as_deref()
                        .context("--stats is required for rank splits")?;
                    let ranking = experts::rarity_ranking(&read(path, io::parse_category_stats)?);
                    let end = a.end.unwrap_or(ranking.len());
                    experts::split_by_rank(&ranking, a.start, end, a.num_experts)?
                }
                SplitBy::Embedding => {
                    let path = a
                        .embeddings
                        .as_deref()
                        .context("--embeddings is required for embedding splits")?;
                    experts::split_by_embedding(
                        &read(path, io::parse_embeddings)?,
                        a.num_experts,
                        a.seed,
                    )?
                }
            };
            write_atomic(&a.output, |w| io::write_groups(w, &groups))?;
        }
        Command::FilterExpert(a) => {
            let gts = read(&a.gt, io::parse_ground_truth)?;
            let v = read(&a.verification, io::parse_verification)?;
            let group = read_group(&a.group_file, a.group_index)?;
            let d = experts::filter_for_expert(&gts, &v, &group);
            write_atomic(&a.output_gt, |w| io::write_ground_truth(w, &d.ground_truth))?;
            write_atomic(&a.output_verification, |w| {
                io::write_verification(w, &d.verification)
            })?;
            write_atomic(&a.output_images, |w| io::write_image_list(w, &d.images))?;
        }
        Command::Restrict(a) => {
            let preds = read_predictions(&a.input)?;
            let group = read_group(&a.group_file, a.group_index)?;
            write_predictions(&a.output, &experts::restrict_predictions(&preds, &group))?;
        }
        Command::DropSmallMasks(a) => {
            let preds = read_predictions(&a.input)?;
            write_predictions(
                &a.output,
                &postprocess::drop_small_masks(&preds, a.min_area),
            )?;
        }
        Command::Trim(a) => {
            let preds = read_predictions(&a.input)?;
            let (kept, report) = postprocess::trim_to_budget(&preds, a.max_bytes)?;
            write_predictions(&a.output, &kept)?;
            if let Some(p) = &a.report {
                write_atomic(p, |w| io::write_trim_report(w, &report))?;
            }
            writeln!(out, "removed,{}", report.total_removed())?;
            writeln!(out, "final_bytes,{}", report.final_bytes)?;
            writeln!(out, "budget,{}", report.budget)?;
        }
        Command::Eval(a) => {
            let preds = read_predictions(&a.predictions)?;
            let gts = read(&a.gt, io::parse_ground_truth)?;
            let v = read(&a.verification, io::parse_verification)?;
            let h = read_hierarchy(a.hierarchy.as_deref())?;
            let mode = match a.mode {
                Mode::Box => EvalMode::Box,
                Mode::Mask => EvalMode::Mask,
            };
            let report = evaluate(&preds, &gts, &v, &h, a.iou_threshold, mode)?;
            if let Some(p) = &a.report {
                write_atomic(p, |w| io::write_eval_report(w, &report))?;
            }
            writeln!(out, "{}", io::format_map(report.map))?;
        }
        Command::Pipeline(_) => bail!("pipeline stages cannot run a nested pipeline"),
    }
    Ok(())
}
