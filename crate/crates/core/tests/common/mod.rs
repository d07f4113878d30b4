#![allow(dead_code)]

use std::path::Path;
use std::sync::{Arc, Mutex};
use std::thread;

use affordgrasp::scene::{self, default_camera, GeneratedScene, ObjectSpec, SceneSpec};
use nalgebra::Vector3;

#[derive(Debug, Clone)]
pub struct Recorded {
    pub path: String,
    pub authorization: Option<String>,
    pub body: String,
}

/// Minimal HTTP mock. `reply(call_index, path, body)` returns status and
/// response body.
pub struct MockServer {
    pub url: String,
    pub requests: Arc<Mutex<Vec<Recorded>>>,
}

impl MockServer {
    pub fn start<F>(reply: F) -> Self
    where
        F: Fn(usize, &str, &str) -> (u16, String) + Send + 'static,
    {
        let server = tiny_http::Server::http("127.0.0.1:0").expect("bind mock server");
        let url = format!("http://{}", server.server_addr().to_ip().expect("ip listener"));
        let requests = Arc::new(Mutex::new(Vec::new()));
        let log = Arc::clone(&requests);
        thread::spawn(move || {
            for mut req in server.incoming_requests() {
                let mut body = String::new();
                req.as_reader().read_to_string(&mut body).ok();
                let authorization = req
                    .headers()
                    .iter()
                    .find(|h| h.field.equiv("Authorization"))
                    .map(|h| h.value.to_string());
                let path = req.url().to_string();
                let n = {
                    let mut log = log.lock().unwrap();
                    log.push(Recorded { path: path.clone(), authorization, body: body.clone() });
                    log.len() - 1
                };
                let (status, text) = reply(n, &path, &body);
                let header = tiny_http::Header::from_bytes("Content-Type", "application/json").unwrap();
                let _ = req.respond(tiny_http::Response::from_string(text).with_status_code(status).with_header(header));
            }
        });
        Self { url, requests }
    }

    pub fn calls(&self) -> Vec<Recorded> {
        self.requests.lock().unwrap().clone()
    }
}

/// URL of a port with nothing listening.
pub fn dead_url() -> String {
    let l = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
    let port = l.local_addr().unwrap().port();
    drop(l);
    format!("http://127.0.0.1:{port}")
}

pub const CUT: &str = "cut the vegetables";
pub const HAND_OVER: &str = "hand over the knife";

/// Knife scene with a two-task decomposition table, saved to `dir`.
pub fn knife_scene(dir: &Path, seed: u64) -> GeneratedScene {
    let mut g = scene::generate_scene(&SceneSpec::single(ObjectSpec::knife(Vector3::zeros())), &default_camera(), seed).unwrap();
    g.fixture.decomposition_table = serde_json::from_value(serde_json::json!({
        CUT: {"object": "knife", "grasp_parts": ["handle"], "avoid_parts": ["blade"]},
        HAND_OVER: {"object": "knife", "grasp_parts": ["blade"], "avoid_parts": ["handle"]},
    }))
    .unwrap();
    g.fixture.save(dir).unwrap();
    g
}
