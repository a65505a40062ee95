//! A configuration where one prediction wins on MSE and COS but loses on
//! cosine ranking.

fn at(deg: f64) -> Vec<f32> {
    let r = deg.to_radians();
    vec![r.cos() as f32, r.sin() as f32]
}

pub struct RankingGeometry {
    pub gts: Vec<Vec<f32>>,
    /// Predictions for every sample when the first one is predicted by A.
    pub preds_a: Vec<Vec<f32>>,
    pub preds_b: Vec<Vec<f32>>,
}

/// Ground truths at 0°, 30° and 180°. A sits at 16°, just past the
/// bisector towards its neighbour; B sits 40° away on the far side. The
/// other two samples are predicted exactly in both cases.
pub fn ranking_geometry() -> RankingGeometry {
    let gts = vec![at(0.0), at(30.0), at(180.0)];
    let mut preds_a = gts.clone();
    preds_a[0] = at(16.0);
    let mut preds_b = gts.clone();
    preds_b[0] = at(-40.0);
    RankingGeometry { gts, preds_a, preds_b }
}
