use dts_core::data::{gen_phantom, PhantomConfig};

#[test]
fn every_foreground_class_is_usually_present() {
    let cfg = PhantomConfig::default();
    let samples = gen_phantom(&cfg, 1000, 2024).unwrap();
    let mut present = vec![0usize; cfg.num_classes];
    for s in &samples {
        assert_eq!(s.image.dim(), s.label.dim());
        let mut seen = vec![false; cfg.num_classes];
        for &l in s.label.iter() {
            seen[l as usize] = true;
        }
        for (c, &p) in seen.iter().enumerate() {
            present[c] += p as usize;
        }
    }
    for (c, &n) in present.iter().enumerate().skip(1) {
        assert!(n >= 950, "class {c} present in only {n}/1000 images");
    }
}
