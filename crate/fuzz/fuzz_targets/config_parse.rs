#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    // Anything that parses must survive a snapshot round trip unchanged.
    if let Ok(cfg) = lcnn::config::parse_config(text) {
        let reparsed = lcnn::config::parse_config(&cfg.to_text()).expect("snapshot parses");
        assert_eq!(reparsed, cfg);
    }
});
