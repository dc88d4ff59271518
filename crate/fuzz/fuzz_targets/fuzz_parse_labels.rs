#![no_main]
use libfuzzer_sys::fuzz_target;
use milforge::features::LabelSpace;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        let labels = LabelSpace::new(vec!["neg".into(), "pos".into()]).unwrap();
        let _ = milforge::config::parse_labels(text, &labels);
    }
});
