//! Reference scenarios for the emulated channel: the stepped-interference
//! functional test and the parcours procedure with completion-time slots.

use serde::{Deserialize, Serialize};

use crate::channel::{ChannelConfig, TransportConfig};
use crate::controller::scenario::{Scenario, ScenarioMetadata, Step, SCENARIO_SCHEMA_VERSION};
use crate::traffic::{mix_seed, DeviceTrafficProfile, FlowSpec, IatModel};

pub const SUT_DEVICE: &str = "sut";
pub const INTERFERER_COUNTS: [usize; 5] = [0, 2, 4, 6, 8];
pub const STEP_DURATION_S: f64 = 60.0;
pub const PARCOURS_DURATION_S: f64 = 120.0;

pub const VIDEO_FLOW_ID: u16 = 1;
pub const STREAM_FLOW_ID: u16 = 2;
pub const INTERFERER_FLOW_ID: u16 = 1;

const VIDEO_SHARE: f64 = 0.6;
const VIDEO_FPS: f64 = 30.0;
/// SUT and interferers use equal packet sizes so tail drop does not favour
/// either side.
const SUT_PAYLOAD: u32 = 1500;
const INTERFERER_PAYLOAD: u32 = 1500;
/// One echo request per this many SUT stream packets.
const SUT_ECHO_EVERY: u32 = 4;
const INTERFERER_ECHO_EVERY: u32 = 50;
const BASE_SEED: u64 = 0x5715_6000;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FunctionalParams {
    pub capacity_bps: f64,
    pub sut_rate_bps: f64,
    pub interferer_rate_bps: f64,
    /// Queue size expressed as drain time at capacity.
    pub buffer_s: f64,
    pub propagation_ns: u64,
    pub step_duration_s: f64,
}

impl Default for FunctionalParams {
    fn default() -> Self {
        FunctionalParams {
            capacity_bps: 100e6,
            sut_rate_bps: 10e6,
            interferer_rate_bps: 30e6,
            buffer_s: 0.1,
            propagation_ns: 1_000_000,
            step_duration_s: STEP_DURATION_S,
        }
    }
}

pub fn interferer_id(i: usize) -> String {
    format!("sting-{i:02}")
}

/// Video frames plus a constant stream that together offer `rate_bps`.
pub fn sut_profile(rate_bps: f64) -> DeviceTrafficProfile {
    let frame_bytes = (rate_bps * VIDEO_SHARE / 8.0 / VIDEO_FPS).round() as u32;
    let video_rate = f64::from(frame_bytes) * 8.0 * VIDEO_FPS;
    DeviceTrafficProfile::new(
        SUT_DEVICE,
        vec![
            FlowSpec::frame_video(VIDEO_FLOW_ID, VIDEO_FPS, frame_bytes, SUT_PAYLOAD, mix_seed(BASE_SEED, 0)),
            FlowSpec::constant_stream(STREAM_FLOW_ID, rate_bps - video_rate, SUT_PAYLOAD, mix_seed(BASE_SEED, 1))
                .with_echo_every(SUT_ECHO_EVERY),
        ],
    )
}

/// Poisson arrivals: independent interferers never phase-lock with each
/// other or with the SUT.
pub fn interferer_profile(i: usize, rate_bps: f64) -> DeviceTrafficProfile {
    let mut flow = FlowSpec::constant_stream(
        INTERFERER_FLOW_ID,
        rate_bps,
        INTERFERER_PAYLOAD,
        mix_seed(BASE_SEED, 100 + i as u64),
    )
    .with_echo_every(INTERFERER_ECHO_EVERY);
    flow.iat_model = Some(IatModel::Poisson);
    DeviceTrafficProfile::new(interferer_id(i), vec![flow])
}

fn devices(sut_rate_bps: f64, interferer_rate_bps: f64) -> Vec<DeviceTrafficProfile> {
    let max = *INTERFERER_COUNTS.iter().max().unwrap_or(&0);
    std::iter::once(sut_profile(sut_rate_bps))
        .chain((1..=max).map(|i| interferer_profile(i, interferer_rate_bps)))
        .collect()
}

fn active(interferers: usize) -> Vec<String> {
    std::iter::once(SUT_DEVICE.to_string())
        .chain((1..=interferers).map(interferer_id))
        .collect()
}

fn channel(p: &FunctionalParams) -> ChannelConfig {
    ChannelConfig {
        capacity_bps: p.capacity_bps.round() as u64,
        buffer_bytes: (p.capacity_bps * p.buffer_s / 8.0).round() as u64,
        propagation_ns: p.propagation_ns,
    }
}

pub fn build_functional_test_with(p: &FunctionalParams) -> Scenario {
    Scenario {
        schema_version: SCENARIO_SCHEMA_VERSION,
        scenario_id: "functional".into(),
        sut_device: Some(SUT_DEVICE.into()),
        devices: devices(p.sut_rate_bps, p.interferer_rate_bps),
        steps: INTERFERER_COUNTS
            .iter()
            .map(|&n| Step {
                label: format!("{n} interferers"),
                active_devices: active(n),
                duration_s: p.step_duration_s,
                repetitions: 1,
                tracked: true,
                profile_overrides: vec![],
            })
            .collect(),
        transport: TransportConfig::Emulated(channel(p)),
        window_s: 1.0,
        metadata: ScenarioMetadata {
            operator: None,
            description: Some("SUT link quality while interferers are added two at a time".into()),
            labels: vec!["functional".into()],
        },
        clocks_synchronized: false,
    }
}

pub fn build_functional_test(capacity_bps: f64, sut_rate_bps: f64, interferer_rate_bps: f64) -> Scenario {
    build_functional_test_with(&FunctionalParams {
        capacity_bps,
        sut_rate_bps,
        interferer_rate_bps,
        ..FunctionalParams::default()
    })
}

/// One untracked introductory run without interference, then two tracked
/// runs at each interferer count.
pub fn build_parcours_test() -> Scenario {
    let p = FunctionalParams::default();
    let mut steps = vec![Step {
        label: "introductory run".into(),
        active_devices: active(0),
        duration_s: PARCOURS_DURATION_S,
        repetitions: 1,
        tracked: false,
        profile_overrides: vec![],
    }];
    steps.extend(INTERFERER_COUNTS.iter().map(|&n| Step {
        label: format!("{n} interferers"),
        active_devices: active(n),
        duration_s: PARCOURS_DURATION_S,
        repetitions: 2,
        tracked: true,
        profile_overrides: vec![],
    }));
    Scenario {
        schema_version: SCENARIO_SCHEMA_VERSION,
        scenario_id: "parcours".into(),
        sut_device: Some(SUT_DEVICE.into()),
        devices: devices(p.sut_rate_bps, p.interferer_rate_bps),
        steps,
        transport: TransportConfig::Emulated(channel(&p)),
        window_s: 1.0,
        metadata: ScenarioMetadata {
            operator: None,
            description: Some("Teleoperation course runs; annotate each tracked run with its completion time".into()),
            labels: vec!["parcours".into()],
        },
        clocks_synchronized: false,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Trend {
    NonIncreasing,
    NonDecreasing,
}

/// Properties a reference scenario is expected to exhibit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpectedProperties {
    pub planned_steps: usize,
    pub tracked_steps: usize,
    pub interferer_counts: Vec<usize>,
    pub step_duration_s: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sut_goodput: Option<Trend>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sut_rtt: Option<Trend>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferenceScenario {
    pub name: String,
    pub scenario: Scenario,
    pub expected: ExpectedProperties,
}

pub fn reference_scenarios() -> Vec<ReferenceScenario> {
    let functional = build_functional_test_with(&FunctionalParams::default());
    let parcours = build_parcours_test();
    vec![
        ReferenceScenario {
            name: "functional".into(),
            expected: ExpectedProperties {
                planned_steps: 5,
                tracked_steps: 5,
                interferer_counts: INTERFERER_COUNTS.to_vec(),
                step_duration_s: STEP_DURATION_S,
                sut_goodput: Some(Trend::NonIncreasing),
                sut_rtt: Some(Trend::NonDecreasing),
            },
            scenario: functional,
        },
        ReferenceScenario {
            name: "parcours".into(),
            expected: ExpectedProperties {
                planned_steps: 11,
                tracked_steps: 10,
                interferer_counts: vec![0, 0, 0, 2, 2, 4, 4, 6, 6, 8, 8],
                step_duration_s: PARCOURS_DURATION_S,
                sut_goodput: None,
                sut_rtt: None,
            },
            scenario: parcours,
        },
    ]
}

pub fn reference_scenario(name: &str) -> Option<ReferenceScenario> {
    reference_scenarios().into_iter().find(|r| r.name == name)
}
