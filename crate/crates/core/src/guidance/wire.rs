//! Newline-delimited JSON wire protocol for external noise predictors.
//!
//! Request:
//! `{"v":1,"id":N,"width":W,"height":H,"t":T,"alpha_bar":A,"prompt":"...",
//!   "z_t":"<base64 f32 LE, row-major RGB interleaved>",
//!   "condition_labels":"<base64 u8, row-major>","cfg_scale":S}`
//!
//! Response: `{"v":1,"id":N,"eps_hat":"<base64 f32 LE>"}` or
//! `{"v":1,"id":N,"error":"message"}`. `id` is `null` only when the request
//! was too malformed to recover one. An empty `condition_labels` string means
//! no condition image was supplied.

use std::io::{self, BufRead, Write};

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::{point_mass_eps, NoiseQuery};
use crate::error::{Error, Result};
use crate::image_io::ImageRgb;

pub const PROTOCOL_VERSION: u64 = 1;

/// Decoded request.
#[derive(Debug, Clone, PartialEq)]
pub struct WireRequest {
    pub id: u64,
    pub width: usize,
    pub height: usize,
    pub t: usize,
    pub alpha_bar: f64,
    pub prompt: String,
    pub z_t: Vec<f32>,
    pub condition_labels: Vec<u8>,
    pub cfg_scale: f64,
}

/// Decoded response; `result` carries `eps_hat` or the server's error message.
#[derive(Debug, Clone, PartialEq)]
pub struct WireResponse {
    pub id: Option<u64>,
    pub result: std::result::Result<Vec<f32>, String>,
}

#[derive(Serialize, Deserialize)]
struct RequestJson {
    v: u64,
    id: u64,
    width: usize,
    height: usize,
    t: usize,
    alpha_bar: f64,
    prompt: String,
    z_t: String,
    condition_labels: String,
    cfg_scale: f64,
}

#[derive(Serialize)]
struct ResponseJson<'a> {
    v: u64,
    id: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    eps_hat: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    error: Option<&'a str>,
}

pub fn encode_f32(values: &[f32]) -> String {
    let mut bytes = Vec::with_capacity(values.len() * 4);
    for v in values {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    STANDARD.encode(bytes)
}

pub fn decode_f32(text: &str) -> Result<Vec<f32>> {
    let bytes = STANDARD.decode(text).map_err(|e| Error::Protocol(format!("bad base64: {e}")))?;
    if bytes.len() % 4 != 0 {
        return Err(Error::Protocol(format!("f32 payload length {} is not a multiple of 4", bytes.len())));
    }
    Ok(bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect())
}

impl WireRequest {
    pub fn from_query(id: u64, q: &NoiseQuery<'_>) -> Self {
        WireRequest {
            id,
            width: q.z_t.width,
            height: q.z_t.height,
            t: q.t,
            alpha_bar: q.alpha_bar,
            prompt: q.prompt.to_string(),
            z_t: q.z_t.data.iter().flatten().map(|&v| v as f32).collect(),
            condition_labels: q.condition.map(|c| c.labels.clone()).unwrap_or_default(),
            cfg_scale: q.cfg_scale,
        }
    }

    pub fn z_t_image(&self) -> Result<ImageRgb> {
        let values: Vec<f64> = self.z_t.iter().map(|&v| v as f64).collect();
        ImageRgb::from_interleaved(self.width, self.height, &values).map_err(|e| Error::Protocol(e.to_string()))
    }
}

pub fn encode_request(req: &WireRequest) -> String {
    let json = RequestJson {
        v: PROTOCOL_VERSION,
        id: req.id,
        width: req.width,
        height: req.height,
        t: req.t,
        alpha_bar: req.alpha_bar,
        prompt: req.prompt.clone(),
        z_t: encode_f32(&req.z_t),
        condition_labels: STANDARD.encode(&req.condition_labels),
        cfg_scale: req.cfg_scale,
    };
    serde_json::to_string(&json).expect("request serializes")
}

fn check_version(value: &Value) -> Result<()> {
    match value.get("v").and_then(Value::as_u64) {
        Some(PROTOCOL_VERSION) => Ok(()),
        Some(v) => Err(Error::Protocol(format!("unsupported protocol version {v}"))),
        None => Err(Error::Protocol("missing protocol version field \"v\"".into())),
    }
}

pub fn decode_request(line: &str) -> Result<WireRequest> {
    let value: Value = serde_json::from_str(line).map_err(|e| Error::Protocol(format!("malformed json: {e}")))?;
    check_version(&value)?;
    let raw: RequestJson =
        serde_json::from_value(value).map_err(|e| Error::Protocol(format!("malformed request: {e}")))?;
    let z_t = decode_f32(&raw.z_t)?;
    if z_t.len() != raw.width * raw.height * 3 {
        return Err(Error::Protocol(format!(
            "z_t has {} values, expected {}x{}x3",
            z_t.len(),
            raw.width,
            raw.height
        )));
    }
    let condition_labels =
        STANDARD.decode(&raw.condition_labels).map_err(|e| Error::Protocol(format!("bad base64: {e}")))?;
    if !condition_labels.is_empty() && condition_labels.len() != raw.width * raw.height {
        return Err(Error::Protocol("condition_labels do not match the image size".into()));
    }
    Ok(WireRequest {
        id: raw.id,
        width: raw.width,
        height: raw.height,
        t: raw.t,
        alpha_bar: raw.alpha_bar,
        prompt: raw.prompt,
        z_t,
        condition_labels,
        cfg_scale: raw.cfg_scale,
    })
}

pub fn encode_response(resp: &WireResponse) -> String {
    let (eps_hat, error) = match &resp.result {
        Ok(eps) => (Some(encode_f32(eps)), None),
        Err(msg) => (None, Some(msg.as_str())),
    };
    serde_json::to_string(&ResponseJson { v: PROTOCOL_VERSION, id: resp.id, eps_hat, error }).expect("response serializes")
}

pub fn decode_response(line: &str) -> Result<WireResponse> {
    let value: Value = serde_json::from_str(line).map_err(|e| Error::Protocol(format!("malformed json: {e}")))?;
    check_version(&value)?;
    let id = match value.get("id") {
        None => return Err(Error::Protocol("response has no id".into())),
        Some(Value::Null) => None,
        Some(v) => Some(v.as_u64().ok_or_else(|| Error::Protocol("response id is not an unsigned integer".into()))?),
    };
    if let Some(err) = value.get("error") {
        let msg = err.as_str().ok_or_else(|| Error::Protocol("error field is not a string".into()))?;
        return Ok(WireResponse { id, result: Err(msg.to_string()) });
    }
    let eps = value
        .get("eps_hat")
        .and_then(Value::as_str)
        .ok_or_else(|| Error::Protocol("response carries neither eps_hat nor error".into()))?;
    Ok(WireResponse { id, result: Ok(decode_f32(eps)?) })
}

/// Serves requests from `reader` until end of stream, one response line per
/// request line. Malformed requests get an error response, never a panic.
pub fn serve<R, W, H>(reader: R, mut writer: W, mut handler: H) -> io::Result<usize>
where
    R: BufRead,
    W: Write,
    H: FnMut(&WireRequest) -> std::result::Result<Vec<f32>, String>,
{
    let mut served = 0;
    for line in reader.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let response = match decode_request(&line) {
            Ok(req) => WireResponse { id: Some(req.id), result: handler(&req) },
            Err(e) => {
                let id = serde_json::from_str::<Value>(&line).ok().and_then(|v| v.get("id").and_then(Value::as_u64));
                WireResponse { id, result: Err(e.to_string()) }
            }
        };
        writer.write_all(encode_response(&response).as_bytes())?;
        writer.write_all(b"\n")?;
        writer.flush()?;
        served += 1;
    }
    Ok(served)
}

/// Request handler implementing the point-mass target oracle.
pub fn echo_target_handler(target: ImageRgb) -> impl FnMut(&WireRequest) -> std::result::Result<Vec<f32>, String> {
    move |req: &WireRequest| {
        let z = req.z_t_image().map_err(|e| e.to_string())?;
        let eps = point_mass_eps(&z, &target, req.alpha_bar).map_err(|e| e.to_string())?;
        Ok(eps.data.iter().flatten().map(|&v| v as f32).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sample_request() -> WireRequest {
        WireRequest {
            id: 7,
            width: 2,
            height: 1,
            t: 10,
            alpha_bar: 0.5,
            prompt: "a knight".into(),
            z_t: vec![0.5, -1.0, 2.0, 0.0, 1e-30, -0.0],
            condition_labels: vec![3, 0],
            cfg_scale: 7.5,
        }
    }

    #[test]
    fn request_round_trip() {
        let r = sample_request();
        assert_eq!(decode_request(&encode_request(&r)).unwrap(), r);
    }

    #[test]
    fn wrong_version_and_garbage_are_protocol_errors() {
        let line = encode_request(&sample_request()).replace("\"v\":1", "\"v\":2");
        assert!(matches!(decode_request(&line), Err(Error::Protocol(m)) if m.contains("version")));
        assert!(matches!(decode_request("{not json"), Err(Error::Protocol(_))));
        assert!(matches!(decode_response("{\"v\":1,\"id\":3}"), Err(Error::Protocol(_))));
        assert!(matches!(decode_response("{\"v\":1,\"id\":3,\"eps_hat\":\"@@@\"}"), Err(Error::Protocol(_))));
    }

    #[test]
    fn serve_answers_every_line() {
        let good = encode_request(&sample_request());
        let bad_version = good.replace("\"v\":1", "\"v\":2");
        let input = format!("{good}\n{bad_version}\n{{garbage\n");
        let mut out = Vec::new();
        let target = ImageRgb::zeros(2, 1);
        let n = serve(input.as_bytes(), &mut out, echo_target_handler(target)).unwrap();
        assert_eq!(n, 3);
        let lines: Vec<WireResponse> =
            String::from_utf8(out).unwrap().lines().map(|l| decode_response(l).unwrap()).collect();
        assert_eq!(lines[0].id, Some(7));
        assert!(lines[0].result.is_ok());
        assert_eq!(lines[1].id, Some(7));
        assert!(lines[1].result.as_ref().unwrap_err().contains("version"));
        assert_eq!(lines[2].id, None);
        assert!(lines[2].result.is_err());
    }

    proptest! {
        #[test]
        fn f32_payload_round_trips_bit_exactly(bits in proptest::collection::vec(any::<u32>(), 0..64)) {
            let values: Vec<f32> = bits.iter().map(|b| f32::from_bits(*b)).collect();
            let back = decode_f32(&encode_f32(&values)).unwrap();
            prop_assert_eq!(back.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), bits);
        }
    }
}
