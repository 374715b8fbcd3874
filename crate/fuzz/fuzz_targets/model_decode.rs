#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    // Decoding must never panic, and anything that decodes must re-encode
    // to the identical bytes: the format has one canonical form.
    if let Ok((net, head)) = lcnn::model::decode_model(data) {
        let encoded = lcnn::model::encode_model(&net, head.as_ref());
        assert_eq!(encoded, data);
    }
});
