#![no_main]

use lcnn::data::LabelColumn;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    // First byte selects how the label column is addressed.
    let Some((&selector, csv)) = data.split_first() else {
        return;
    };
    let column = match selector {
        0..=3 => LabelColumn::Index(selector as usize),
        _ => LabelColumn::Name("label".to_string()),
    };
    if let Ok(dataset) = lcnn::data::parse_csv(csv, &column) {
        assert!(dataset.features().is_finite());
        assert!(dataset.labels().iter().all(|&y| y < dataset.num_classes()));
    }
});
