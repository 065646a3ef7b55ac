//! Runtime configuration: flat `KEY value` files, validation, digests.
//!
//! Keys mirror the simulation's canonical parameter names so existing
//! parameter tables double as documentation. Unknown keys are rejected;
//! service frequencies must be powers of two (0 disables a service).

use std::collections::BTreeMap;
use std::fmt::Write as _;

use sha2::{Digest, Sha256};

use crate::genome::{MutationConfig, NUM_KIN_LEVELS};

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("unknown config key {0:?}")]
    UnknownKey(String),
    #[error("bad value for {key}: {value:?} ({reason})")]
    BadValue {
        key: String,
        value: String,
        reason: String,
    },
    #[error("{key} must be a power of two (got {value})")]
    NotPowerOfTwo { key: String, value: u64 },
    #[error("malformed config line {line}: {text:?}")]
    MalformedLine { line: usize, text: String },
}

macro_rules! run_config {
    ($( $field:ident : $ty:ty = $default:expr , $key:literal ; )+) => {
        /// Every runtime parameter of the simulation with its default.
        #[derive(Clone, Debug, PartialEq)]
        pub struct RunConfig {
            $( pub $field: $ty, )+
        }

        impl Default for RunConfig {
            fn default() -> RunConfig {
                RunConfig {
                    $( $field: $default, )+
                }
            }
        }

        impl RunConfig {
            /// Apply one `KEY value` assignment.
            pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
                match key {
                    $(
                        $key => {
                            self.$field = value.parse::<$ty>().map_err(|e| {
                                ConfigError::BadValue {
                                    key: key.to_string(),
                                    value: value.to_string(),
                                    reason: e.to_string(),
                                }
                            })?;
                        }
                    )+
                    _ => return Err(ConfigError::UnknownKey(key.to_string())),
                }
                Ok(())
            }

            /// Canonical `KEY value` rendering (sorted keys).
            pub fn render(&self) -> String {
                let mut pairs: BTreeMap<&str, String> = BTreeMap::new();
                $( pairs.insert($key, format!("{}", self.$field)); )+
                let mut out = String::new();
                for (k, v) in pairs {
                    let _ = writeln!(out, "{k} {v}");
                }
                out
            }
        }
    };
}

run_config! {
    // demographics
    n_cells: usize = 14_400, "N_CELLS";
    grid_width: usize = 0, "GRID_WIDTH";   // 0: derive a square from N_CELLS
    grid_height: usize = 0, "GRID_HEIGHT";
    n_threads: usize = 1, "N_THREADS";
    // run control
    run_updates: u64 = 0, "RUN_UPDATES";
    run_seconds: f64 = 0.0, "RUN_SECONDS";
    throw_on_extinction: bool = true, "THROW_ON_EXTINCTION";
    seed_fill_fraction: f64 = 1.0, "SEED_FILL_FRACTION";
    genesis: String = String::from("generate"), "GENESIS";
    // resource
    min_start_resource: f64 = 0.8, "MIN_START_RESOURCE";
    max_start_resource: f64 = 0.9, "MAX_START_RESOURCE";
    resource_decay: f64 = 0.995, "RESOURCE_DECAY";
    apop_recovery_frac: f64 = 0.8, "APOP_RECOVERY_FRAC";
    spawn_defense_cost: f64 = 1.1, "SPAWN_DEFENSE_COST";
    rep_thresh: f64 = 1.0, "REP_THRESH";
    // harvest
    base_harvest_rate: f64 = 0.02, "BASE_HARVEST_RATE";
    collective_harvest_rate: f64 = 0.02, "COLLECTIVE_HARVEST_RATE";
    optimal_quorum_count: usize = 12, "OPTIMAL_QUORUM_COUNT";
    group_size_decay_base: f64 = 0.9995, "GROUP_SIZE_DECAY_BASE";
    receipt_decay: f64 = 0.999_000_25, "RECEIPT_DECAY";
    p_set_quorum_bit: f64 = 1.0, "P_SET_QUORUM_BIT";
    // lifecycle
    group_expiration_duration_0: u64 = 256, "GROUP_EXPIRATION_DURATION_0";
    group_expiration_duration_1: u64 = 1024, "GROUP_EXPIRATION_DURATION_1";
    cell_age_duration: u64 = 1024, "CELL_AGE_DURATION";
    // genome
    program_start_size: usize = 128, "PROGRAM_START_SIZE";
    program_max_size: usize = 4096, "PROGRAM_MAX_SIZE";
    mutation_rate: f64 = 0.1, "MUTATION_RATE";
    point_mutation_rate: f64 = 0.0002, "POINT_MUTATION_RATE";
    sequence_defect_rate: f64 = 0.001, "SEQUENCE_DEFECT_RATE";
    minor_sequence_mutation_bound: usize = 8, "MINOR_SEQUENCE_MUTATION_BOUND";
    severe_sequence_mutation_rate: f64 = 0.001, "SEVERE_SEQUENCE_MUTATION_RATE";
    mutation_enabled: bool = true, "MUTATION_ENABLED";
    // hardware
    hardware_execution_rounds: usize = 1, "HARDWARE_EXECUTION_ROUNDS";
    hardware_execution_cycles: usize = 16, "HARDWARE_EXECUTION_CYCLES";
    max_cores: usize = 16, "MAX_CORES";
    controller_mapped_state_defect_rate: f64 = 0.0005, "CONTROLLER_MAPPED_STATE_DEFECT_RATE";
    // service frequencies (powers of two; 0 disables)
    apoptosis_service_frequency: u64 = 16, "APOPTOSIS_SERVICE_FREQUENCY";
    birth_setup_service_frequency: u64 = 16, "BIRTH_SETUP_SERVICE_FREQUENCY";
    conduit_flush_service_frequency: u64 = 1, "CONDUIT_FLUSH_SERVICE_FREQUENCY";
    collective_harvesting_service_frequency: u64 = 4, "COLLECTIVE_HARVESTING_SERVICE_FREQUENCY";
    cpu_execution_service_frequency: u64 = 1, "CPU_EXECUTION_SERVICE_FREQUENCY";
    group_expiration_service_frequency: u64 = 1, "GROUP_EXPIRATION_SERVICE_FREQUENCY";
    running_log_purge_service_frequency: u64 = 64, "RUNNING_LOG_PURGE_SERVICE_FREQUENCY";
    diversity_maintenance_service_frequency: u64 = 64, "DIVERSITY_MAINTENANCE_SERVICE_FREQUENCY";
    diversity_maintenance_prevalence: f64 = 0.25, "DIVERSITY_MAINTENANCE_PREVALENCE";
    stint_diversity_maintenance_service_frequency: u64 = 0, "STINT_DIVERSITY_MAINTENANCE_SERVICE_FREQUENCY";
    stint_diversity_maintenance_prevalence: f64 = 0.25, "STINT_DIVERSITY_MAINTENANCE_PREVALENCE";
    decay_to_baseline_service_frequency: u64 = 32, "DECAY_TO_BASELINE_SERVICE_FREQUENCY";
    epoch_advance_service_frequency: u64 = 8, "EPOCH_ADVANCE_SERVICE_FREQUENCY";
    event_launching_service_frequency: u64 = 8, "EVENT_LAUNCHING_SERVICE_FREQUENCY";
    intermittent_cpu_reset_service_frequency: u64 = 64, "INTERMITTENT_CPU_RESET_SERVICE_FREQUENCY";
    intermittent_state_perturb_services_frequency: u64 = 1, "INTERMITTENT_STATE_PERTURB_SERVICES_FREQUENCY";
    inter_message_counter_clear_service_frequency: u64 = 16, "INTER_MESSAGE_COUNTER_CLEAR_SERVICE_FREQUENCY";
    inter_message_launching_service_frequency: u64 = 8, "INTER_MESSAGE_LAUNCHING_SERVICE_FREQUENCY";
    intra_message_launching_service_frequency: u64 = 1, "INTRA_MESSAGE_LAUNCHING_SERVICE_FREQUENCY";
    state_output_put_service_frequency: u64 = 8, "STATE_OUTPUT_PUT_SERVICE_FREQUENCY";
    state_input_jump_service_frequency: u64 = 8, "STATE_INPUT_JUMP_SERVICE_FREQUENCY";
    quorum_service_frequency: u64 = 1, "QUORUM_SERVICE_FREQUENCY";
    resource_decay_service_frequency: u64 = 1, "RESOURCE_DECAY_SERVICE_FREQUENCY";
    resource_harvesting_service_frequency: u64 = 1, "RESOURCE_HARVESTING_SERVICE_FREQUENCY";
    resource_receiving_service_frequency: u64 = 4, "RESOURCE_RECEIVING_SERVICE_FREQUENCY";
    resource_sending_service_frequency: u64 = 1, "RESOURCE_SENDING_SERVICE_FREQUENCY";
    spawn_sending_service_frequency: u64 = 16, "SPAWN_SENDING_SERVICE_FREQUENCY";
    cell_age_service_frequency: u64 = 1, "CELL_AGE_SERVICE_FREQUENCY";
    controller_mapped_state_noise_service_frequency: u64 = 8, "CONTROLLER_MAPPED_STATE_NOISE_SERVICE_FREQUENCY";
    // experiment
    phenotypic_divergence_n_updates: u64 = 2048, "PHENOTYPIC_DIVERGENCE_N_UPDATES";
    phenotypic_divergence_n_cells: usize = 100, "PHENOTYPIC_DIVERGENCE_N_CELLS";
    competition_updates: u64 = 4200, "COMPETITION_UPDATES";
    competition_cells: usize = 3600, "COMPETITION_CELLS";
    doubling_timeout_updates: u64 = 8192, "DOUBLING_TIMEOUT_UPDATES";
    state_exchange_chain_length: usize = 128, "STATE_EXCHANGE_CHAIN_LENGTH";
    message_bucket_count: usize = 20, "MESSAGE_BUCKET_COUNT";
}

const FREQUENCY_KEYS: &[&str] = &[
    "APOPTOSIS_SERVICE_FREQUENCY",
    "BIRTH_SETUP_SERVICE_FREQUENCY",
    "CONDUIT_FLUSH_SERVICE_FREQUENCY",
    "COLLECTIVE_HARVESTING_SERVICE_FREQUENCY",
    "CPU_EXECUTION_SERVICE_FREQUENCY",
    "GROUP_EXPIRATION_SERVICE_FREQUENCY",
    "RUNNING_LOG_PURGE_SERVICE_FREQUENCY",
    "DIVERSITY_MAINTENANCE_SERVICE_FREQUENCY",
    "STINT_DIVERSITY_MAINTENANCE_SERVICE_FREQUENCY",
    "DECAY_TO_BASELINE_SERVICE_FREQUENCY",
    "EPOCH_ADVANCE_SERVICE_FREQUENCY",
    "EVENT_LAUNCHING_SERVICE_FREQUENCY",
    "INTERMITTENT_CPU_RESET_SERVICE_FREQUENCY",
    "INTERMITTENT_STATE_PERTURB_SERVICES_FREQUENCY",
    "INTER_MESSAGE_COUNTER_CLEAR_SERVICE_FREQUENCY",
    "INTER_MESSAGE_LAUNCHING_SERVICE_FREQUENCY",
    "INTRA_MESSAGE_LAUNCHING_SERVICE_FREQUENCY",
    "STATE_OUTPUT_PUT_SERVICE_FREQUENCY",
    "STATE_INPUT_JUMP_SERVICE_FREQUENCY",
    "QUORUM_SERVICE_FREQUENCY",
    "RESOURCE_DECAY_SERVICE_FREQUENCY",
    "RESOURCE_HARVESTING_SERVICE_FREQUENCY",
    "RESOURCE_RECEIVING_SERVICE_FREQUENCY",
    "RESOURCE_SENDING_SERVICE_FREQUENCY",
    "SPAWN_SENDING_SERVICE_FREQUENCY",
    "CELL_AGE_SERVICE_FREQUENCY",
];

impl RunConfig {
    /// Parse a flat `KEY value` file; `#` starts a comment.
    pub fn parse(text: &str) -> Result<RunConfig, ConfigError> {
        let mut cfg = RunConfig::default();
        cfg.apply(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn apply(&mut self, text: &str) -> Result<(), ConfigError> {
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once(char::is_whitespace) else {
                return Err(ConfigError::MalformedLine {
                    line: lineno + 1,
                    text: raw.to_string(),
                });
            };
            self.set(key.trim(), value.trim())?;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let rendered = self.render();
        for line in rendered.lines() {
            let (key, value) = line.split_once(' ').unwrap();
            if FREQUENCY_KEYS.contains(&key) {
                let v: u64 = value.parse().unwrap();
                if v != 0 && !v.is_power_of_two() {
                    return Err(ConfigError::NotPowerOfTwo {
                        key: key.to_string(),
                        value: v,
                    });
                }
            }
        }
        Ok(())
    }

    /// Grid dimensions: explicit width/height, else the squarest
    /// factorization of `n_cells`.
    pub fn grid_dims(&self) -> (usize, usize) {
        if self.grid_width > 0 && self.grid_height > 0 {
            return (self.grid_width, self.grid_height);
        }
        let n = self.n_cells.max(1);
        let mut best = (n, 1);
        let mut w = (n as f64).sqrt() as usize;
        while w >= 1 {
            if n % w == 0 {
                best = (n / w, w);
                break;
            }
            w -= 1;
        }
        best
    }

    pub fn mutation_config(&self) -> MutationConfig {
        if !self.mutation_enabled {
            return MutationConfig::disabled();
        }
        MutationConfig {
            mutation_apply_rate_kin: self.mutation_rate,
            mutation_apply_rate_nonkin: 1.0,
            point_rate_per_bit: self.point_mutation_rate,
            sequence_defect_rate_per_site: self.sequence_defect_rate,
            minor_indel_bound: self.minor_sequence_mutation_bound,
            severe_rate: self.severe_sequence_mutation_rate,
        }
    }

    pub fn group_expiration_duration(&self, level: usize) -> u64 {
        debug_assert!(level < NUM_KIN_LEVELS);
        match level {
            0 => self.group_expiration_duration_0,
            _ => self.group_expiration_duration_1,
        }
    }

    /// Hex digest of the canonical rendering; stamped into every output.
    pub fn digest(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update(self.render().as_bytes());
        let out = hasher.finalize();
        out.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_pass_validation() {
        RunConfig::default().validate().unwrap();
    }

    #[test]
    fn parse_and_digest_round_trip() {
        let cfg = RunConfig::parse("N_CELLS 900\nRESOURCE_DECAY 0.99 # faster decay\n").unwrap();
        assert_eq!(cfg.n_cells, 900);
        assert_eq!(cfg.resource_decay, 0.99);
        assert_eq!(cfg.grid_dims(), (30, 30));
        let again = RunConfig::parse(&cfg.render()).unwrap();
        assert_eq!(again.digest(), cfg.digest());
        assert_ne!(cfg.digest(), RunConfig::default().digest());
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(matches!(
            RunConfig::parse("NO_SUCH_KEY 1"),
            Err(ConfigError::UnknownKey(_))
        ));
    }

    #[test]
    fn power_of_two_enforced() {
        assert!(matches!(
            RunConfig::parse("QUORUM_SERVICE_FREQUENCY 3"),
            Err(ConfigError::NotPowerOfTwo { .. })
        ));
        // 0 disables a service and is allowed
        RunConfig::parse("STINT_DIVERSITY_MAINTENANCE_SERVICE_FREQUENCY 0").unwrap();
    }

    #[test]
    fn grid_dims_prefers_explicit() {
        let cfg = RunConfig::parse("GRID_WIDTH 120\nGRID_HEIGHT 60\nN_CELLS 10").unwrap();
        assert_eq!(cfg.grid_dims(), (120, 60));
        let square = RunConfig::parse("N_CELLS 14400").unwrap();
        assert_eq!(square.grid_dims(), (120, 120));
    }
}
