use super::AnnotatedPair;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Side {
    Query,
    Reference,
}

/// Histogram of box areas in px².
#[derive(Debug, Clone, PartialEq)]
pub struct SizeHistogram {
    /// Ascending bin edges; bin `i` is `[edges[i], edges[i + 1])`, the last bin closed.
    pub edges: Vec<f64>,
    pub counts: Vec<usize>,
    /// Areas outside `[edges[0], edges[last]]`.
    pub outside: usize,
    pub mean: f64,
    pub median: f64,
    pub n: usize,
}

/// Area histogram over every object of every pair on one side.
pub fn size_distribution(pairs: &[AnnotatedPair], side: Side, edges: &[f64]) -> Result<SizeHistogram> {
    if edges.len() < 2 || edges.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Config("histogram edges must be strictly ascending (>= 2 edges)".into()));
    }
    let mut areas: Vec<f64> = pairs
        .iter()
        .flat_map(|p| p.objects.iter())
        .map(|o| match side {
            Side::Query => o.query_box.area(),
            Side::Reference => o.bbox.area(),
        })
        .collect();
    if areas.is_empty() {
        return Err(Error::Empty("size distribution input"));
    }

    let mut counts = vec![0; edges.len() - 1];
    let mut outside = 0;
    let last = edges.len() - 1;
    for &a in &areas {
        if a < edges[0] || a > edges[last] {
            outside += 1;
            continue;
        }
        let bin = edges.partition_point(|&e| e <= a).saturating_sub(1).min(last - 1);
        counts[bin] += 1;
    }

    let n = areas.len();
    let mean = areas.iter().sum::<f64>() / n as f64;
    areas.sort_by(f64::total_cmp);
    let median = if n % 2 == 1 {
        areas[n / 2]
    } else {
        0.5 * (areas[n / 2 - 1] + areas[n / 2])
    };
    Ok(SizeHistogram {
        edges: edges.to_vec(),
        counts,
        outside,
        mean,
        median,
        n,
    })
}

/// Roughly logarithmic area bins from 16 px² to 16384 px².
pub fn default_area_edges() -> Vec<f64> {
    (4..=14).map(|k| 2f64.powi(k)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{Alignment, ObjectAnnotation};
    use crate::geometry::{BBox, ClickPoint};

    fn pair_with(sides: &[f64]) -> AnnotatedPair {
        AnnotatedPair {
            pair_id: "x".into(),
            query: image::RgbImage::new(64, 64),
            reference: image::RgbImage::new(64, 64),
            objects: sides
                .iter()
                .enumerate()
                .map(|(i, &s)| ObjectAnnotation {
                    tag: i as u32,
                    click: ClickPoint::new(10.0, 10.0),
                    query_box: BBox::new(10.0, 10.0, 4.0, 4.0),
                    bbox: BBox::new(32.0, 32.0, s, s),
                })
                .collect(),
            alignment: Alignment::V1,
            transform: None,
        }
    }

    #[test]
    fn single_box_single_bin() {
        let h = size_distribution(&[pair_with(&[10.0])], Side::Reference, &[0.0, 50.0, 150.0, 500.0]).unwrap();
        assert_eq!(h.counts, vec![0, 1, 0]);
        assert_eq!(h.mean, 100.0);
        assert_eq!(h.median, 100.0);
    }

    #[test]
    fn mean_and_median() {
        let h = size_distribution(&[pair_with(&[10.0, 20.0, 20.0])], Side::Reference, &default_area_edges()).unwrap();
        assert_eq!(h.median, 400.0);
        assert_eq!(h.mean, 300.0);
        assert_eq!(h.n, 3);
    }

    #[test]
    fn empty_input_is_error() {
        assert!(size_distribution(&[], Side::Query, &default_area_edges()).is_err());
    }
}
