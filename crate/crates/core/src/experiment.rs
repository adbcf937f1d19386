//! One-stop construction of a synthetic federation: domains, partition,
//! topology and initial weights, all derived from a single seed.

use serde::{Deserialize, Serialize};

use crate::client::{LocalAlgorithm, LocalTraining};
use crate::data::{default_ownership, generate_domains, materialize, partition, GeneratorConfig, PartitionSpec, Samples};
use crate::fot::SinkhornConfig;
use crate::math::SeededRng;
use crate::merge::DEFAULT_ALPHA;
use crate::model::{ModelSpec, ModelWeights};
use crate::orchestrator::{LrSchedule, Mode, RunConfig, Topology};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FederationSpec {
    pub generator: GeneratorConfig,
    /// Domain held out for evaluation; every other domain is a source.
    pub target_domain: usize,
    pub stations: usize,
    pub clients_per_station: usize,
    /// Data heterogeneity: 1 is IID, 0 is exclusive-domain.
    pub lambda: f64,
    pub active_fraction: f64,
}

impl FederationSpec {
    /// 3 stations × 3 clients on 3 source domains plus one held-out domain.
    pub fn desk() -> Self {
        Self {
            generator: GeneratorConfig::desk(4, 4, 240),
            target_domain: 3,
            stations: 3,
            clients_per_station: 3,
            lambda: 1.0,
            active_fraction: 1.0,
        }
    }

    pub fn model_spec(&self) -> Result<ModelSpec> {
        ModelSpec::reduced_lenet(self.generator.image, self.generator.classes)
    }
}

#[derive(Clone, Debug)]
pub struct Federation {
    pub spec: FederationSpec,
    pub partition: PartitionSpec,
    pub topology: Topology,
    /// Indexed by global client id.
    pub client_data: Vec<Samples>,
    pub target: Samples,
    pub init: ModelWeights,
}

const TAG_PARTITION: u64 = 0x9a27;
const TAG_INIT: u64 = 0x1417;

/// Builds every input of a run from `seed`. The data streams do not depend
/// on the model or training settings.
pub fn build_federation(spec: &FederationSpec, seed: u64) -> Result<Federation> {
    if spec.target_domain >= spec.generator.domains {
        return Err(Error::InvalidArgument(format!(
            "target domain {} out of range for {} domains",
            spec.target_domain, spec.generator.domains
        )));
    }
    if spec.stations == 0 || spec.clients_per_station == 0 {
        return Err(Error::InvalidArgument("need at least one station and one client per station".into()));
    }
    let domains = generate_domains(seed, &spec.generator)?;
    let (sources, targets): (Vec<_>, Vec<_>) = domains.into_iter().partition(|d| d.domain != spec.target_domain);
    let target = targets.into_iter().next().expect("target domain exists").samples;
    let sizes: Vec<usize> = sources.iter().map(|d| d.samples.len()).collect();
    let per_station = vec![spec.clients_per_station; spec.stations];
    let ownership = default_ownership(sources.len(), spec.stations, &per_station);
    let partition = partition(spec.lambda, &ownership, &sizes)?;
    let source_refs: Vec<&Samples> = sources.iter().map(|d| &d.samples).collect();
    let client_data = materialize(&partition, &source_refs, &mut SeededRng::derive(seed, &[TAG_PARTITION]))?;
    let model = spec.model_spec()?;
    let init = ModelWeights::init(&model, &mut SeededRng::derive(seed, &[TAG_INIT]))?;
    Ok(Federation {
        spec: spec.clone(),
        partition,
        topology: Topology {
            active_fraction: spec.active_fraction,
            ..Topology::uniform(spec.stations, spec.clients_per_station)
        },
        client_data,
        target,
        init,
    })
}

/// Training settings used by the desk-scale experiments.
pub fn desk_run_config(mode: Mode, seed: u64) -> RunConfig {
    RunConfig {
        mode,
        rounds: 20,
        station_rounds: 2,
        local: LocalTraining {
            algorithm: LocalAlgorithm::FedAvg,
            epochs: 2,
            batch_size: 32,
            lr: 0.05,
        },
        schedule: LrSchedule::Cosine,
        sinkhorn: SinkhornConfig::default(),
        alpha: DEFAULT_ALPHA,
        reference_station: 0,
        gram_clip: None,
        dp: None,
        seed,
    }
}
