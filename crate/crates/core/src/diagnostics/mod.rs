//! Segment bookkeeping, attention traces and segment-wise attention mass.

mod export;
mod mass;
mod segments;
mod trace;

pub use export::{
    export_dilution_curve, export_layer_heatmap, load_dilution_curve, load_heatmap,
    read_dilution_curve, read_heatmap, write_dilution_curve, write_layer_heatmap, DILUTION_HEADER,
};
pub use mass::{
    segment_mass_layer_avg, segment_mass_layer_resolved, MassProfile, SegmentMasses, StepMass,
};
pub use segments::{Segment, SegmentMap};
pub use trace::{AttentionTrace, TraceStep, TRACE_ROW_TOLERANCE};

#[cfg(test)]
mod tests {
    use super::*;

    fn uniform_trace() -> (AttentionTrace, SegmentMap) {
        let mut t = AttentionTrace::new(1, 1);
        t.record(3, vec![vec![vec![0.25; 4]]]).unwrap();
        (
            t,
            SegmentMap::new(vec![0], vec![1, 2], vec![], vec![3]).unwrap(),
        )
    }

    /// Layer 0 puts all mass on the image, layer 1 on the answer.
    fn two_layer_trace() -> (AttentionTrace, SegmentMap) {
        let mut t = AttentionTrace::new(2, 2);
        let img = vec![0.0, 1.0, 0.0];
        let ans = vec![0.0, 0.0, 1.0];
        t.record(2, vec![vec![img.clone(), img], vec![ans.clone(), ans]])
            .unwrap();
        (t, SegmentMap::contiguous(1, 1, 0, 1))
    }

    #[test]
    fn layer_avg_uniform_row() {
        let (t, m) = uniform_trace();
        let a = segment_mass_layer_avg(&t, &m, 3).unwrap();
        assert_eq!(a.0, [0.25, 0.5, 0.0, 0.25]);
    }

    #[test]
    fn single_segment_takes_all_mass() {
        let mut t = AttentionTrace::new(1, 2);
        t.record(2, vec![vec![vec![0.2, 0.3, 0.5], vec![0.6, 0.1, 0.3]]])
            .unwrap();
        let m = SegmentMap::contiguous(0, 3, 0, 0);
        let a = segment_mass_layer_avg(&t, &m, 2).unwrap();
        assert!((a.get(Segment::Image) - 1.0).abs() < 1e-7);
        assert_eq!(a.get(Segment::System), 0.0);
        assert_eq!(a.get(Segment::Answer), 0.0);
    }

    #[test]
    fn constructed_two_layer_trace() {
        let (t, m) = two_layer_trace();
        let l0 = segment_mass_layer_resolved(&t, &m, 2, 0).unwrap();
        let l1 = segment_mass_layer_resolved(&t, &m, 2, 1).unwrap();
        assert_eq!(
            (l0.get(Segment::Image), l0.get(Segment::Answer)),
            (1.0, 0.0)
        );
        assert_eq!(
            (l1.get(Segment::Image), l1.get(Segment::Answer)),
            (0.0, 1.0)
        );
        let avg = segment_mass_layer_avg(&t, &m, 2).unwrap();
        assert_eq!(
            (avg.get(Segment::Image), avg.get(Segment::Answer)),
            (0.5, 0.5)
        );
        assert!(segment_mass_layer_resolved(&t, &m, 2, 2).is_err());
        assert!(segment_mass_layer_avg(&t, &m, 1).is_err());
    }

    #[test]
    fn trace_rejects_bad_rows() {
        let mut t = AttentionTrace::new(1, 1);
        assert!(t.record(1, vec![vec![vec![0.5, 0.4]]]).is_err());
        assert!(t.record(1, vec![vec![vec![1.0]]]).is_err());
        assert!(t.record(1, vec![]).is_err());
        assert!(t.record(1, vec![vec![]]).is_err());
        assert!(t.is_empty());
    }

    #[test]
    fn dilution_csv_single_step() {
        let m = SegmentMap::contiguous(0, 2, 0, 0);
        let mut t2 = AttentionTrace::new(1, 1);
        t2.record(1, vec![vec![vec![0.0, 1.0]]]).unwrap();
        let p = MassProfile::from_trace(&t2, &m).unwrap();
        let mut buf = Vec::new();
        export_dilution_curve(&p, &mut buf).unwrap();
        assert_eq!(
            String::from_utf8(buf).unwrap(),
            "step,alpha_sys,alpha_img,alpha_que,alpha_ans\n1,0,1,0,0\n"
        );
        assert!(export_dilution_curve(&MassProfile::default(), Vec::new()).is_err());
    }

    #[test]
    fn heatmap_single_cell_and_constructed() {
        let mut t = AttentionTrace::new(1, 1);
        t.record(1, vec![vec![vec![0.5, 0.5]]]).unwrap();
        let p = MassProfile::from_trace(&t, &SegmentMap::contiguous(1, 1, 0, 0)).unwrap();
        let mut buf = Vec::new();
        export_layer_heatmap(&p, Segment::Image, &mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "0.5\n");

        let (t, m) = two_layer_trace();
        let p = MassProfile::from_trace(&t, &m).unwrap();
        let mut buf = Vec::new();
        export_layer_heatmap(&p, Segment::Image, &mut buf).unwrap();
        assert_eq!(
            read_heatmap(buf.as_slice()).unwrap(),
            vec![vec![1.0], vec![0.0]]
        );
    }

    #[test]
    fn write_errors_carry_path() {
        let (t, m) = uniform_trace();
        let p = MassProfile::from_trace(&t, &m).unwrap();
        let bad = std::path::Path::new("/nonexistent-dir/curve.csv");
        let err = write_dilution_curve(&p, bad).unwrap_err();
        assert!(err.to_string().contains("/nonexistent-dir/curve.csv"));
    }
}
