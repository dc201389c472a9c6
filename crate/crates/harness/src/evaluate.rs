//! Scoring a model over a test split under one sensor condition.

use depthprompt_core::{BiasSpec, DepthRaster, EvalWindow, Execution, MetricAccumulator, MetricReport, SparseDepth};
use depthprompt_net::{forward_pipeline_with, Checkpoint};

use crate::corpus::Scene;
use crate::error::Result;

/// Sparse input the test condition produces for a scene. Keyed by the scene
/// seed only, so every model sees identical inputs.
pub fn test_sample(spec: &BiasSpec, scene: &Scene) -> Result<SparseDepth> {
    Ok(spec.apply_lenient(&scene.gt, scene.seed)?)
}

/// Pools per-pixel metrics of `predict` over `scenes`. Scenes may be scored
/// in parallel; accumulators are merged in scene order.
pub fn evaluate_with<F>(
    scenes: &[Scene],
    spec: &BiasSpec,
    window: EvalWindow,
    exec: Execution,
    predict: F,
) -> Result<MetricReport>
where
    F: Fn(&Scene, &SparseDepth) -> Result<DepthRaster> + Sync,
{
    let parts = exec.map_range(scenes.len(), |i| -> Result<MetricAccumulator> {
        let scene = &scenes[i];
        let sparse = test_sample(spec, scene)?;
        let pred = predict(scene, &sparse)?;
        let mut acc = MetricAccumulator::new();
        acc.add(&pred, &scene.gt, window)?;
        Ok(acc)
    });
    let mut total = MetricAccumulator::new();
    for part in parts {
        total.merge(&part?);
    }
    Ok(total.report()?)
}

pub fn evaluate(
    checkpoint: &Checkpoint,
    spec: &BiasSpec,
    scenes: &[Scene],
    window: EvalWindow,
    exec: Execution,
) -> Result<MetricReport> {
    evaluate_with(scenes, spec, window, exec, |scene, sparse| {
        let out = forward_pipeline_with(
            &scene.image,
            sparse,
            &checkpoint.foundation,
            &checkpoint.prompt,
            &checkpoint.pipeline,
            Execution::Sequential,
        )?;
        Ok(out.final_depth)
    })
}
