//! TOML scenario configuration.

use std::path::{Path, PathBuf};

use rhsim_core::defenses::{AnvilConfig, DefenseConfig, Placement, TargetClass};
use rhsim_core::dram::{ControllerPolicy, DramGeometry, PagePolicy, RefreshMode, TrrConfig};
use rhsim_core::hammer::{CalibrationSetup, TechniqueKind, DEFAULT_SINGLE_SIDED_K};
use rhsim_core::oracle::OracleConfig;
use rhsim_core::orchestrator::{MachineProfile, Method};
use rhsim_core::osmodel::{Allocator, DEFAULT_CATT_GAP_ROWS};
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScenarioConfig {
    pub seed: u64,
    pub profile: MachineProfile,
    /// Machines attacked by `dos`; empty means one machine of `profile`.
    pub fleet: Vec<MachineProfile>,
    pub output: PathBuf,
    pub dram: DramSection,
    pub calibration: CalibrationSection,
    pub attack: AttackSection,
    pub defenses: DefenseSection,
    pub template: TemplateSection,
    pub waylay: WaylaySection,
    pub dos: DosSection,
    pub optimize: OptimizeSection,
    pub opflip: OpflipSection,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            profile: MachineProfile::Desktop,
            fleet: Vec::new(),
            output: PathBuf::from("rhsim-out"),
            dram: DramSection::default(),
            calibration: CalibrationSection::default(),
            attack: AttackSection::default(),
            defenses: DefenseSection::default(),
            template: TemplateSection::default(),
            waylay: WaylaySection::default(),
            dos: DosSection::default(),
            optimize: OptimizeSection::default(),
            opflip: OpflipSection::default(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GeometryPreset {
    Small,
    Ddr3_8gib,
    Ddr4_16gib,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PagePolicyChoice {
    Open,
    Closed,
    Adaptive,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RefreshChoice {
    Normal,
    Double,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DramSection {
    /// Geometry used by `template`.
    pub geometry: GeometryPreset,
    pub banks: u32,
    pub rows: u32,
    pub refresh: RefreshChoice,
    pub page_policy: PagePolicyChoice,
    pub close_timeout_ns: u64,
    pub para: f64,
    pub reorder_combine: u32,
    /// Zero disables TRR.
    pub trr_threshold: u64,
    pub trr_radius: u32,
    /// Zero disables MAC.
    pub mac: u64,
}

impl Default for DramSection {
    fn default() -> Self {
        Self {
            geometry: GeometryPreset::Ddr4_16gib,
            banks: 8,
            rows: 512,
            refresh: RefreshChoice::Normal,
            page_policy: PagePolicyChoice::Adaptive,
            close_timeout_ns: 200,
            para: 0.0,
            reorder_combine: 0,
            trr_threshold: 0,
            trr_radius: 1,
            mac: 0,
        }
    }
}

impl DramSection {
    pub fn refresh_mode(&self) -> RefreshMode {
        match self.refresh {
            RefreshChoice::Normal => RefreshMode::Normal,
            RefreshChoice::Double => RefreshMode::Double,
        }
    }

    pub fn geometry(&self) -> DramGeometry {
        let g = match self.geometry {
            GeometryPreset::Small => DramGeometry::small(self.banks, self.rows),
            GeometryPreset::Ddr3_8gib => DramGeometry::ddr3_8gib(),
            GeometryPreset::Ddr4_16gib => DramGeometry::ddr4_16gib(),
        };
        DramGeometry {
            refresh_mode: self.refresh_mode(),
            ..g
        }
    }

    pub fn policy(&self) -> ControllerPolicy {
        let page = match self.page_policy {
            PagePolicyChoice::Open => PagePolicy::OpenPage,
            PagePolicyChoice::Closed => PagePolicy::ClosedPage,
            PagePolicyChoice::Adaptive => PagePolicy::Adaptive {
                close_timeout_ns: self.close_timeout_ns,
            },
        };
        ControllerPolicy {
            reorder_combine: (self.reorder_combine > 0).then_some(self.reorder_combine),
            para: (self.para > 0.0).then_some(self.para),
            trr: (self.trr_threshold > 0).then_some(TrrConfig {
                radius: self.trr_radius,
                threshold: self.trr_threshold,
            }),
            mac: (self.mac > 0).then_some(self.mac),
            ..ControllerPolicy::with_page_policy(page)
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CalibrationSection {
    /// JSON record written by `calibrate`; empty recalibrates.
    pub record: Option<PathBuf>,
    pub attempts: u64,
    pub verify_attempts: u64,
    pub density: f64,
    /// Replaces the calibrated cell density when set.
    pub density_override: Option<f64>,
}

impl Default for CalibrationSection {
    fn default() -> Self {
        let s = CalibrationSetup::default();
        Self {
            record: None,
            attempts: s.attempts,
            verify_attempts: s.verify_attempts,
            density: s.density,
            density_override: None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TechniqueChoice {
    DoubleSided,
    SingleSided,
    OneLocation,
}

impl TechniqueChoice {
    pub fn kind(self) -> TechniqueKind {
        match self {
            Self::DoubleSided => TechniqueKind::DoubleSided,
            Self::SingleSided => TechniqueKind::SingleSided { k: DEFAULT_SINGLE_SIDED_K },
            Self::OneLocation => TechniqueKind::OneLocation,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlacementChoice {
    Waylaying,
    Chasing,
    Exhaustion,
    None,
}

impl PlacementChoice {
    pub fn placement(self) -> Placement {
        match self {
            Self::Waylaying => Placement::Waylaying,
            Self::Chasing => Placement::Chasing,
            Self::Exhaustion => Placement::Exhaustion,
            Self::None => Placement::None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetChoice {
    User,
    Kernel,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AllocatorChoice {
    Default,
    Catt,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OracleChoice {
    Stealth,
    Fast,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AttackSection {
    pub technique: TechniqueChoice,
    pub placement: PlacementChoice,
    pub enclave: bool,
    pub target: TargetChoice,
    pub allocator: AllocatorChoice,
    pub kernel_rows: u32,
    pub oracle: OracleChoice,
    pub target_frames: u64,
    pub max_template_attempts: u64,
    pub max_placement_iterations: u64,
    pub restore: bool,
}

impl Default for AttackSection {
    fn default() -> Self {
        Self {
            technique: TechniqueChoice::OneLocation,
            placement: PlacementChoice::Waylaying,
            enclave: true,
            target: TargetChoice::User,
            allocator: AllocatorChoice::Catt,
            kernel_rows: rhsim_core::orchestrator::SMALL_KERNEL_ROWS,
            oracle: OracleChoice::Stealth,
            target_frames: 1,
            max_template_attempts: 50_000,
            max_placement_iterations: 1_000_000,
            restore: true,
        }
    }
}

impl AttackSection {
    pub fn allocator(&self) -> Allocator {
        match self.allocator {
            AllocatorChoice::Default => Allocator::Default,
            AllocatorChoice::Catt => Allocator::Catt {
                kernel_rows: self.kernel_rows,
                gap_rows: DEFAULT_CATT_GAP_ROWS,
            },
        }
    }

    pub fn target(&self) -> TargetClass {
        match self.target {
            TargetChoice::User => TargetClass::User,
            TargetChoice::Kernel => TargetClass::Kernel,
        }
    }

    pub fn oracle(&self) -> OracleConfig {
        match self.oracle {
            OracleChoice::Stealth => OracleConfig::stealth(),
            OracleChoice::Fast => OracleConfig::fast(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DefenseSection {
    pub d2_miss_threshold: u64,
    pub anvil_miss_threshold: u64,
    pub anvil_sample_size: usize,
    pub d5_bound_fraction: f64,
    pub trace_attempts: u32,
}

impl Default for DefenseSection {
    fn default() -> Self {
        let d = DefenseConfig::default();
        Self {
            d2_miss_threshold: d.d2_miss_threshold,
            anvil_miss_threshold: d.anvil.miss_threshold,
            anvil_sample_size: d.anvil.sample_size,
            d5_bound_fraction: d.d5_bound_fraction,
            trace_attempts: 8,
        }
    }
}

impl DefenseSection {
    pub fn config(&self) -> DefenseConfig {
        let d = DefenseConfig::default();
        DefenseConfig {
            d2_miss_threshold: self.d2_miss_threshold,
            anvil: AnvilConfig {
                miss_threshold: self.anvil_miss_threshold,
                sample_size: self.anvil_sample_size,
                ..d.anvil
            },
            d5_bound_fraction: self.d5_bound_fraction,
            ..d
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TemplateSection {
    pub technique: TechniqueChoice,
    pub attempts: u64,
}

impl Default for TemplateSection {
    fn default() -> Self {
        Self {
            technique: TechniqueChoice::OneLocation,
            attempts: 2_000,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WaylaySection {
    /// Seeded runs of each placement method.
    pub runs: u64,
    /// Target frames per waylaying run, as a fraction of the cycling pool.
    pub target_fraction: f64,
    pub max_iterations: u64,
}

impl Default for WaylaySection {
    fn default() -> Self {
        Self {
            runs: 20,
            target_fraction: 0.01,
            max_iterations: 100_000,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DosSection {
    pub seek_max_s: f64,
    pub destroy_max_s: f64,
}

impl Default for DosSection {
    fn default() -> Self {
        Self {
            seek_max_s: 8.0 * 3600.0,
            destroy_max_s: 60.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizeSection {
    pub memory_gib: f64,
    pub relocation_s: f64,
    pub exploitable: f64,
    pub search_bound: u64,
    /// Minutes per exploitable flip for double-sided, single-sided and
    /// one-location templating.
    pub minutes: [f64; 3],
    pub methods: Vec<Method>,
}

impl Default for OptimizeSection {
    fn default() -> Self {
        Self {
            memory_gib: 12.0,
            relocation_s: 2.68,
            exploitable: 29.0,
            search_bound: 100_000,
            minutes: [17.0, 19.0, 56.0],
            methods: vec![Method::Waylaying, Method::Chasing],
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OpflipSection {
    /// Binary to scan; empty scans the bundled target page.
    pub binary: Option<PathBuf>,
    pub start: Option<usize>,
    pub end: Option<usize>,
}

fn invalid(key: &str, expected: &str) -> CliError {
    CliError::Config(format!("{key}: expected {expected}"))
}

impl ScenarioConfig {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        let cfg: Self = toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    /// The resolved configuration, defaults included.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let unit = |v: f64| (0.0..=1.0).contains(&v);
        if !unit(self.dram.para) {
            return Err(invalid("dram.para", "probability ∈ [0,1]"));
        }
        if self.dram.geometry == GeometryPreset::Small
            && !(self.dram.banks.is_power_of_two() && self.dram.rows.is_power_of_two() && self.dram.rows >= 4)
        {
            return Err(invalid("dram.banks/dram.rows", "powers of two with rows >= 4"));
        }
        if self.dram.page_policy == PagePolicyChoice::Adaptive && self.dram.close_timeout_ns == 0 {
            return Err(invalid("dram.close_timeout_ns", "> 0"));
        }
        if !(self.calibration.density > 0.0 && self.calibration.density <= 1.0) {
            return Err(invalid("calibration.density", "a fraction ∈ (0,1]"));
        }
        if self.calibration.density_override.is_some_and(|d| !unit(d)) {
            return Err(invalid("calibration.density_override", "a fraction ∈ [0,1]"));
        }
        if self.calibration.attempts == 0 {
            return Err(invalid("calibration.attempts", ">= 1"));
        }
        if self.attack.target_frames == 0 {
            return Err(invalid("attack.target_frames", ">= 1"));
        }
        if self.attack.target == TargetChoice::User && self.attack.placement == PlacementChoice::None {
            return Err(invalid("attack.placement", "waylaying, chasing or exhaustion for a user target"));
        }
        if !unit(self.defenses.d5_bound_fraction) {
            return Err(invalid("defenses.d5_bound_fraction", "a fraction ∈ [0,1]"));
        }
        if self.defenses.anvil_sample_size == 0 {
            return Err(invalid("defenses.anvil_sample_size", ">= 1"));
        }
        if !(self.waylay.target_fraction > 0.0 && self.waylay.target_fraction <= 1.0) {
            return Err(invalid("waylay.target_fraction", "a fraction ∈ (0,1]"));
        }
        if self.waylay.runs == 0 {
            return Err(invalid("waylay.runs", ">= 1"));
        }
        if !(self.dos.seek_max_s > 0.0 && self.dos.destroy_max_s > 0.0) {
            return Err(invalid("dos.seek_max_s/dos.destroy_max_s", "> 0"));
        }
        let o = &self.optimize;
        if !(o.memory_gib > 0.0 && o.relocation_s >= 0.0 && o.exploitable >= 1.0 && o.search_bound >= 1) {
            return Err(invalid("optimize", "memory_gib > 0, relocation_s >= 0, exploitable >= 1, search_bound >= 1"));
        }
        if o.minutes.iter().any(|m| !(*m > 0.0)) {
            return Err(invalid("optimize.minutes", "three values > 0"));
        }
        if let (Some(s), Some(e)) = (self.opflip.start, self.opflip.end) {
            if s >= e {
                return Err(invalid("opflip.start/opflip.end", "start < end"));
            }
        }
        Ok(())
    }

    pub fn calibration_setup(&self) -> CalibrationSetup {
        CalibrationSetup {
            attempts: self.calibration.attempts,
            verify_attempts: self.calibration.verify_attempts,
            density: self.calibration.density,
            seed: self.seed,
            ..CalibrationSetup::default()
        }
    }

    pub fn machines(&self) -> Vec<MachineProfile> {
        if self.fleet.is_empty() {
            vec![self.profile]
        } else {
            self.fleet.clone()
        }
    }
}

/// `--profile` values.
#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum ProfileArg {
    Desktop,
    Server,
}

impl From<ProfileArg> for MachineProfile {
    fn from(p: ProfileArg) -> Self {
        match p {
            ProfileArg::Desktop => MachineProfile::Desktop,
            ProfileArg::Server => MachineProfile::Server,
        }
    }
}
