//! Configuration and attestation service.
//!
//! Owners register once: they upload their keys and sign off on the release
//! rules they approve. Enclaves are attested by comparing their code
//! measurement with the measurement named by an approved rule for their role,
//! and secrets are provisioned only when such a rule covers the request.
//!
//! Some release constraints are structural and cannot be overridden by any
//! policy: a data key goes only to the training enclave of the same index,
//! the aggregator's rules are approved by the model owner alone, and no data
//! key is ever released to the aggregator or admin.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use rand::{CryptoRng, RngCore};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::crypto::{keygen, KeyOwner, SymmetricKey};

pub const RULE_DATA_TRAINING_ONLY: &str = "R-DATA-TRAINING-ONLY";
pub const RULE_DATA_OWNER_ISOLATION: &str = "R-DATA-OWNER-ISOLATION";
pub const RULE_MASK_RECIPIENT: &str = "R-MASK-RECIPIENT";
pub const RULE_NO_MATCH: &str = "R-NO-MATCHING-RULE";
pub const RULE_SESSION_PEER: &str = "R-SESSION-PEER";
pub const BUILTIN_SESSION_RULE: &str = "builtin-session";
pub const BUILTIN_MASK_RULE: &str = "builtin-mask-recipient";

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum CasError {
    #[error("attestation of {enclave} failed: {reason}")]
    AttestationFailed { enclave: String, reason: String },
    #[error("enclave {0} is not attested")]
    NotAttested(String),
    #[error("unknown enclave {0}")]
    UnknownEnclave(String),
    #[error("request for {secret} by {enclave} denied by {rule}")]
    Denied {
        enclave: String,
        secret: SecretId,
        rule: String,
    },
    #[error("secret {0} has not been uploaded")]
    MissingSecret(SecretId),
    #[error("invalid policy: {0}")]
    InvalidPolicy(String),
    #[error("enclave {enclave} does not hold role {expected}")]
    WrongRole { enclave: String, expected: Role },
    #[error("owner {0} already registered")]
    DuplicateRegistration(Owner),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum Role {
    Training(usize),
    Aggregator,
    Admin,
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Role::Training(i) => write!(f, "training-{i}"),
            Role::Aggregator => f.write_str("aggregator"),
            Role::Admin => f.write_str("admin"),
        }
    }
}

impl FromStr for Role {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "aggregator" => Ok(Role::Aggregator),
            "admin" => Ok(Role::Admin),
            _ => s
                .strip_prefix("training-")
                .and_then(|i| i.parse().ok())
                .map(Role::Training)
                .ok_or_else(|| format!("unknown role {s:?}")),
        }
    }
}

impl TryFrom<String> for Role {
    type Error = String;
    fn try_from(s: String) -> Result<Self, Self::Error> {
        s.parse()
    }
}

impl From<Role> for String {
    fn from(r: Role) -> Self {
        r.to_string()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum Owner {
    Data(usize),
    Model,
}

impl fmt::Display for Owner {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Owner::Data(i) => write!(f, "data-{i}"),
            Owner::Model => f.write_str("model"),
        }
    }
}

impl FromStr for Owner {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "model" => Ok(Owner::Model),
            _ => s
                .strip_prefix("data-")
                .and_then(|i| i.parse().ok())
                .map(Owner::Data)
                .ok_or_else(|| format!("unknown owner {s:?}")),
        }
    }
}

impl TryFrom<String> for Owner {
    type Error = String;
    fn try_from(s: String) -> Result<Self, Self::Error> {
        s.parse()
    }
}

impl From<Owner> for String {
    fn from(o: Owner) -> Self {
        o.to_string()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum SecretId {
    DataKey(usize),
    ModelKey,
    MaskKey { set: u64, index: usize },
    SessionKey(Role, Role),
    PoolSecret,
}

impl SecretId {
    /// Session keys are addressed by an unordered role pair.
    pub fn session(a: Role, b: Role) -> Self {
        if a <= b {
            SecretId::SessionKey(a, b)
        } else {
            SecretId::SessionKey(b, a)
        }
    }

    pub fn key_owner(&self) -> KeyOwner {
        match self {
            SecretId::DataKey(i) => KeyOwner::DataOwner(*i),
            SecretId::ModelKey => KeyOwner::ModelOwner,
            SecretId::MaskKey { set, index } => KeyOwner::MaskKey {
                set: *set,
                index: *index,
            },
            SecretId::SessionKey(a, b) => KeyOwner::SessionKey(a.to_string(), b.to_string()),
            SecretId::PoolSecret => KeyOwner::PoolSecret,
        }
    }
}

impl fmt::Display for SecretId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SecretId::DataKey(i) => write!(f, "data-{i}"),
            SecretId::ModelKey => f.write_str("model"),
            SecretId::MaskKey { set, index } => write!(f, "mask-{set}-{index}"),
            SecretId::SessionKey(a, b) => write!(f, "session-{a}-{b}"),
            SecretId::PoolSecret => f.write_str("pool"),
        }
    }
}

#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct CodeMeasurement(pub [u8; 32]);

impl fmt::Debug for CodeMeasurement {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "CodeMeasurement({})", &hex::encode(self.0)[..16])
    }
}

impl fmt::Display for CodeMeasurement {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&hex::encode(self.0))
    }
}

impl TryFrom<String> for CodeMeasurement {
    type Error = String;
    fn try_from(s: String) -> Result<Self, Self::Error> {
        let bytes = hex::decode(&s).map_err(|e| format!("measurement {s:?}: {e}"))?;
        let arr: [u8; 32] = bytes
            .try_into()
            .map_err(|_| format!("measurement {s:?} is not 32 bytes"))?;
        Ok(Self(arr))
    }
}

impl From<CodeMeasurement> for String {
    fn from(m: CodeMeasurement) -> Self {
        m.to_string()
    }
}

/// What an enclave's measurement is computed over. Hyperparameter and weight
/// values are not part of it; only the names of the placeholders they fill.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CodeIdentity {
    pub role_kind: String,
    pub code_version: String,
    pub placeholders: Vec<String>,
}

impl CodeIdentity {
    pub fn new(role_kind: &str, code_version: &str, placeholders: &[&str]) -> Self {
        Self {
            role_kind: role_kind.to_owned(),
            code_version: code_version.to_owned(),
            placeholders: placeholders.iter().map(|s| s.to_string()).collect(),
        }
    }

    pub fn canonical(&self) -> String {
        format!(
            "citadel-enclave\n{}\n{}\n{}",
            self.role_kind,
            self.code_version,
            self.placeholders.join(",")
        )
    }

    pub fn measure(&self) -> CodeMeasurement {
        CodeMeasurement(Sha256::digest(self.canonical().as_bytes()).into())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum RolePattern {
    AnyTraining,
    Training(usize),
    Aggregator,
    Admin,
}

impl RolePattern {
    pub fn matches(&self, role: Role) -> bool {
        match (self, role) {
            (RolePattern::AnyTraining, Role::Training(_)) => true,
            (RolePattern::Training(i), Role::Training(j)) => *i == j,
            (RolePattern::Aggregator, Role::Aggregator) => true,
            (RolePattern::Admin, Role::Admin) => true,
            _ => false,
        }
    }
}

impl fmt::Display for RolePattern {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RolePattern::AnyTraining => f.write_str("training-*"),
            RolePattern::Training(i) => write!(f, "training-{i}"),
            RolePattern::Aggregator => f.write_str("aggregator"),
            RolePattern::Admin => f.write_str("admin"),
        }
    }
}

impl TryFrom<String> for RolePattern {
    type Error = String;
    fn try_from(s: String) -> Result<Self, Self::Error> {
        match s.as_str() {
            "training-*" => Ok(RolePattern::AnyTraining),
            "aggregator" => Ok(RolePattern::Aggregator),
            "admin" => Ok(RolePattern::Admin),
            _ => s
                .strip_prefix("training-")
                .and_then(|i| i.parse().ok())
                .map(RolePattern::Training)
                .ok_or_else(|| format!("unknown role {s:?}")),
        }
    }
}

impl From<RolePattern> for String {
    fn from(r: RolePattern) -> Self {
        r.to_string()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum SecretPattern {
    Data(usize),
    Model,
    AnyMask,
    Pool,
}

impl SecretPattern {
    pub fn matches(&self, secret: &SecretId) -> bool {
        match (self, secret) {
            (SecretPattern::Data(i), SecretId::DataKey(j)) => i == j,
            (SecretPattern::Model, SecretId::ModelKey) => true,
            (SecretPattern::AnyMask, SecretId::MaskKey { .. }) => true,
            (SecretPattern::Pool, SecretId::PoolSecret) => true,
            _ => false,
        }
    }
}

impl fmt::Display for SecretPattern {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SecretPattern::Data(i) => write!(f, "data-{i}"),
            SecretPattern::Model => f.write_str("model"),
            SecretPattern::AnyMask => f.write_str("mask-*"),
            SecretPattern::Pool => f.write_str("pool"),
        }
    }
}

impl TryFrom<String> for SecretPattern {
    type Error = String;
    fn try_from(s: String) -> Result<Self, Self::Error> {
        match s.as_str() {
            "model" => Ok(SecretPattern::Model),
            "mask-*" => Ok(SecretPattern::AnyMask),
            "pool" => Ok(SecretPattern::Pool),
            _ => s
                .strip_prefix("data-")
                .and_then(|i| i.parse().ok())
                .map(SecretPattern::Data)
                .ok_or_else(|| format!("unknown secret {s:?}")),
        }
    }
}

impl From<SecretPattern> for String {
    fn from(s: SecretPattern) -> Self {
        s.to_string()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PolicyRule {
    pub id: String,
    pub secret: SecretPattern,
    pub role: RolePattern,
    pub measurement: CodeMeasurement,
    pub approvers: BTreeSet<Owner>,
}

impl PolicyRule {
    /// Checks the constraints every rule must satisfy regardless of who
    /// approved it.
    pub fn check_structure(&self) -> Result<(), CasError> {
        let bad = |why: &str| Err(CasError::InvalidPolicy(format!("rule {}: {why}", self.id)));
        match (self.secret, self.role) {
            (SecretPattern::Data(i), RolePattern::Training(j)) if i == j => {
                if !self.approvers.contains(&Owner::Data(i)) || !self.approvers.contains(&Owner::Model)
                {
                    return bad("data key rules need both the data owner and the model owner");
                }
            }
            (SecretPattern::Data(_), _) => {
                return bad("data keys may only go to the training enclave of the same owner")
            }
            (SecretPattern::Model, RolePattern::Admin) => {
                return bad("the admin enclave never needs the model key")
            }
            (SecretPattern::AnyMask, RolePattern::AnyTraining | RolePattern::Training(_)) => {}
            (SecretPattern::AnyMask, _) => return bad("mask keys only go to training enclaves"),
            (SecretPattern::Pool, RolePattern::Admin) => {}
            (SecretPattern::Pool, _) => return bad("the pool secret only goes to the admin"),
            _ => {}
        }
        if self.role == RolePattern::Aggregator
            && self.approvers != BTreeSet::from([Owner::Model])
        {
            return bad("the aggregator is approved by the model owner only");
        }
        if self.approvers.is_empty() {
            return bad("no approvers");
        }
        Ok(())
    }
}

/// A set of release rules, as loaded from a policy file.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SecretPolicy {
    #[serde(default, rename = "rule")]
    pub rules: Vec<PolicyRule>,
}

/// The measurements of the three enclave programs used in a job.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Measurements {
    pub training: CodeMeasurement,
    pub aggregator: CodeMeasurement,
    pub admin: CodeMeasurement,
}

impl SecretPolicy {
    /// Rules for a job with `n` data owners and one model owner.
    pub fn standard(n: usize, m: &Measurements) -> Self {
        let all_data: BTreeSet<Owner> = (0..n).map(Owner::Data).collect();
        let mut everyone = all_data.clone();
        everyone.insert(Owner::Model);
        let mut rules: Vec<PolicyRule> = (0..n)
            .map(|i| PolicyRule {
                id: format!("data-key-{i}"),
                secret: SecretPattern::Data(i),
                role: RolePattern::Training(i),
                measurement: m.training,
                approvers: BTreeSet::from([Owner::Data(i), Owner::Model]),
            })
            .collect();
        rules.push(PolicyRule {
            id: "model-key-training".into(),
            secret: SecretPattern::Model,
            role: RolePattern::AnyTraining,
            measurement: m.training,
            approvers: BTreeSet::from([Owner::Model]),
        });
        rules.push(PolicyRule {
            id: "model-key-aggregator".into(),
            secret: SecretPattern::Model,
            role: RolePattern::Aggregator,
            measurement: m.aggregator,
            approvers: BTreeSet::from([Owner::Model]),
        });
        rules.push(PolicyRule {
            id: "mask-keys".into(),
            secret: SecretPattern::AnyMask,
            role: RolePattern::AnyTraining,
            measurement: m.training,
            approvers: all_data,
        });
        rules.push(PolicyRule {
            id: "admin-pool".into(),
            secret: SecretPattern::Pool,
            role: RolePattern::Admin,
            measurement: m.admin,
            approvers: everyone,
        });
        Self { rules }
    }

    /// The rules `owner` signs off on.
    pub fn approved_by(&self, owner: Owner) -> Vec<PolicyRule> {
        self.rules
            .iter()
            .filter(|r| r.approvers.contains(&owner))
            .cloned()
            .collect()
    }

    pub fn from_toml(text: &str) -> Result<Self, CasError> {
        let policy: Self =
            toml::from_str(text).map_err(|e| CasError::InvalidPolicy(e.to_string()))?;
        for rule in &policy.rules {
            rule.check_structure()?;
        }
        Ok(policy)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("policy serializes")
    }
}

/// One owner's single message to the service: uploaded keys and approvals.
#[derive(Debug, Clone)]
pub struct OwnerRegistration {
    pub owner: Owner,
    pub keys: Vec<(SecretId, SymmetricKey)>,
    pub approvals: Vec<PolicyRule>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EnclaveRecord {
    pub enclave_id: String,
    pub role: Role,
    pub measurement: CodeMeasurement,
    pub attested: bool,
    pub provisioned: BTreeSet<SecretId>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Release {
    pub enclave_id: String,
    pub role: Role,
    pub measurement: CodeMeasurement,
    pub secret: SecretId,
    pub rule: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttestationFailure {
    pub enclave_id: String,
    pub role: Role,
    pub reason: String,
}

#[derive(Debug, Clone)]
struct ActiveRule {
    rule: PolicyRule,
    approved_by: BTreeSet<Owner>,
}

impl ActiveRule {
    fn in_force(&self) -> bool {
        self.rule.approvers.is_subset(&self.approved_by)
    }
}

#[derive(Debug, Default)]
pub struct Cas {
    rules: BTreeMap<String, ActiveRule>,
    secrets: BTreeMap<SecretId, SymmetricKey>,
    mask_recipients: BTreeMap<SecretId, usize>,
    enclaves: BTreeMap<String, EnclaveRecord>,
    owner_messages: BTreeMap<Owner, usize>,
    releases: Vec<Release>,
    failures: Vec<AttestationFailure>,
    denials: Vec<CasError>,
}

impl Cas {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register_owner(&mut self, reg: OwnerRegistration) -> Result<(), CasError> {
        *self.owner_messages.entry(reg.owner).or_default() += 1;
        if self.owner_messages[&reg.owner] > 1 {
            return Err(CasError::DuplicateRegistration(reg.owner));
        }
        for (secret, _) in &reg.keys {
            let allowed = matches!(
                (reg.owner, secret),
                (Owner::Data(i), SecretId::DataKey(j)) if i == *j
            ) || matches!((reg.owner, secret), (Owner::Model, SecretId::ModelKey));
            if !allowed {
                return Err(CasError::InvalidPolicy(format!(
                    "{} may not upload {secret}",
                    reg.owner
                )));
            }
        }
        for rule in &reg.approvals {
            rule.check_structure()?;
            if !rule.approvers.contains(&reg.owner) {
                return Err(CasError::InvalidPolicy(format!(
                    "{} approved rule {} without being listed as an approver",
                    reg.owner, rule.id
                )));
            }
            if let Some(existing) = self.rules.get(&rule.id) {
                if existing.rule != *rule {
                    return Err(CasError::InvalidPolicy(format!(
                        "rule {} approved with conflicting contents",
                        rule.id
                    )));
                }
            }
        }
        for (secret, key) in reg.keys {
            self.secrets.insert(secret, key);
        }
        for rule in reg.approvals {
            self.rules
                .entry(rule.id.clone())
                .or_insert_with(|| ActiveRule {
                    rule,
                    approved_by: BTreeSet::new(),
                })
                .approved_by
                .insert(reg.owner);
        }
        Ok(())
    }

    pub fn owner_message_count(&self, owner: Owner) -> usize {
        self.owner_messages.get(&owner).copied().unwrap_or(0)
    }

    fn rules_in_force(&self) -> impl Iterator<Item = &PolicyRule> {
        self.rules.values().filter(|r| r.in_force()).map(|r| &r.rule)
    }

    /// Attests an enclave: succeeds iff an approved rule for its role names
    /// exactly its measurement. Failures are recorded.
    pub fn attest(
        &mut self,
        enclave_id: &str,
        role: Role,
        measurement: CodeMeasurement,
    ) -> Result<(), CasError> {
        let candidates: Vec<CodeMeasurement> = self
            .rules_in_force()
            .filter(|r| r.role.matches(role))
            .map(|r| r.measurement)
            .collect();
        let reason = if candidates.is_empty() {
            Some(format!("no approved rule for role {role}"))
        } else if !candidates.contains(&measurement) {
            Some(format!("measurement {measurement} not approved for {role}"))
        } else {
            None
        };
        let attested = reason.is_none();
        self.enclaves.insert(
            enclave_id.to_owned(),
            EnclaveRecord {
                enclave_id: enclave_id.to_owned(),
                role,
                measurement,
                attested,
                provisioned: BTreeSet::new(),
            },
        );
        match reason {
            None => Ok(()),
            Some(reason) => {
                self.failures.push(AttestationFailure {
                    enclave_id: enclave_id.to_owned(),
                    role,
                    reason: reason.clone(),
                });
                Err(CasError::AttestationFailed {
                    enclave: enclave_id.to_owned(),
                    reason,
                })
            }
        }
    }

    /// Registers a mask key on behalf of an attested admin enclave.
    /// `recipient` is the only training index that may obtain it.
    pub fn register_mask_key(
        &mut self,
        admin_id: &str,
        secret: SecretId,
        key: SymmetricKey,
        recipient: usize,
    ) -> Result<(), CasError> {
        self.require_role(admin_id, Role::Admin)?;
        if !matches!(secret, SecretId::MaskKey { .. }) {
            return Err(CasError::InvalidPolicy(format!("{secret} is not a mask key")));
        }
        if self.secrets.contains_key(&secret) {
            return Err(CasError::InvalidPolicy(format!("{secret} registered twice")));
        }
        self.secrets.insert(secret.clone(), key);
        self.mask_recipients.insert(secret, recipient);
        Ok(())
    }

    /// Stores the admin's pool secret so a restarted admin can recover it.
    pub fn register_pool_secret(
        &mut self,
        admin_id: &str,
        key: SymmetricKey,
    ) -> Result<(), CasError> {
        self.require_role(admin_id, Role::Admin)?;
        if self.secrets.contains_key(&SecretId::PoolSecret) {
            return Err(CasError::InvalidPolicy("pool secret registered twice".into()));
        }
        self.secrets.insert(SecretId::PoolSecret, key);
        Ok(())
    }

    pub fn has_secret(&self, secret: &SecretId) -> bool {
        self.secrets.contains_key(secret)
    }

    fn require_role(&self, enclave_id: &str, role: Role) -> Result<&EnclaveRecord, CasError> {
        let rec = self
            .enclaves
            .get(enclave_id)
            .ok_or_else(|| CasError::UnknownEnclave(enclave_id.to_owned()))?;
        if !rec.attested {
            return Err(CasError::NotAttested(enclave_id.to_owned()));
        }
        if rec.role != role {
            return Err(CasError::WrongRole {
                enclave: enclave_id.to_owned(),
                expected: role,
            });
        }
        Ok(rec)
    }

    /// Decides which rule, if any, allows `role` with `measurement` to obtain
    /// `secret`. Returns the permitting rule id or the violated rule id.
    pub fn permits(
        &self,
        role: Role,
        measurement: CodeMeasurement,
        secret: &SecretId,
    ) -> Result<String, String> {
        match (secret, role) {
            (SecretId::DataKey(_), Role::Aggregator | Role::Admin) => {
                return Err(RULE_DATA_TRAINING_ONLY.into())
            }
            (SecretId::DataKey(i), Role::Training(j)) if *i != j => {
                return Err(RULE_DATA_OWNER_ISOLATION.into())
            }
            (SecretId::SessionKey(a, b), _) => {
                return if *a == role || *b == role {
                    Ok(BUILTIN_SESSION_RULE.into())
                } else {
                    Err(RULE_SESSION_PEER.into())
                };
            }
            (SecretId::MaskKey { .. }, _) => {
                let recipient = self.mask_recipients.get(secret);
                if recipient.is_none() || Some(role) != recipient.map(|&i| Role::Training(i)) {
                    return Err(RULE_MASK_RECIPIENT.into());
                }
            }
            _ => {}
        }
        self.rules_in_force()
            .find(|r| r.secret.matches(secret) && r.role.matches(role) && r.measurement == measurement)
            .map(|r| r.id.clone())
            .ok_or_else(|| RULE_NO_MATCH.into())
    }

    pub fn provision(
        &mut self,
        enclave_id: &str,
        secret: &SecretId,
    ) -> Result<SymmetricKey, CasError> {
        let rec = self
            .enclaves
            .get(enclave_id)
            .ok_or_else(|| CasError::UnknownEnclave(enclave_id.to_owned()))?;
        if !rec.attested {
            let err = CasError::NotAttested(enclave_id.to_owned());
            self.denials.push(err.clone());
            return Err(err);
        }
        let (role, measurement) = (rec.role, rec.measurement);
        let rule = match self.permits(role, measurement, secret) {
            Ok(rule) => rule,
            Err(rule) => {
                let err = CasError::Denied {
                    enclave: enclave_id.to_owned(),
                    secret: secret.clone(),
                    rule,
                };
                self.denials.push(err.clone());
                return Err(err);
            }
        };
        let key = self
            .secrets
            .get(secret)
            .cloned()
            .ok_or_else(|| CasError::MissingSecret(secret.clone()))?;
        let rec = self.enclaves.get_mut(enclave_id).expect("checked above");
        if rec.provisioned.insert(secret.clone()) {
            self.releases.push(Release {
                enclave_id: enclave_id.to_owned(),
                role,
                measurement,
                secret: secret.clone(),
                rule,
            });
        }
        Ok(key)
    }

    /// Returns the channel key between the requester's role and `peer`,
    /// generating it on first use.
    pub fn session_key<R: RngCore + CryptoRng>(
        &mut self,
        enclave_id: &str,
        peer: Role,
        rng: &mut R,
    ) -> Result<SymmetricKey, CasError> {
        let role = self
            .enclaves
            .get(enclave_id)
            .ok_or_else(|| CasError::UnknownEnclave(enclave_id.to_owned()))?
            .role;
        let secret = SecretId::session(role, peer);
        if !self.secrets.contains_key(&secret) {
            let key = keygen(secret.key_owner(), rng);
            self.secrets.insert(secret.clone(), key);
        }
        self.provision(enclave_id, &secret)
    }

    pub fn enclave(&self, enclave_id: &str) -> Option<&EnclaveRecord> {
        self.enclaves.get(enclave_id)
    }

    pub fn releases(&self) -> &[Release] {
        &self.releases
    }

    pub fn attestation_failures(&self) -> &[AttestationFailure] {
        &self.failures
    }

    pub fn denials(&self) -> &[CasError] {
        &self.denials
    }

    /// Re-checks every logged release against the policy. Returns the
    /// offending releases.
    pub fn audit(&self) -> Vec<Release> {
        self.releases
            .iter()
            .filter(|r| self.permits(r.role, r.measurement, &r.secret).is_err())
            .cloned()
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    fn measurements() -> Measurements {
        Measurements {
            training: CodeIdentity::new("training", "1.0", &["BATCH_SIZE"]).measure(),
            aggregator: CodeIdentity::new("aggregator", "1.0", &["LR"]).measure(),
            admin: CodeIdentity::new("admin", "1.0", &[]).measure(),
        }
    }

    fn setup(n: usize) -> (Cas, Measurements, ChaCha20Rng) {
        let mut rng = ChaCha20Rng::seed_from_u64(9);
        let m = measurements();
        let policy = SecretPolicy::standard(n, &m);
        let mut cas = Cas::new();
        for i in 0..n {
            cas.register_owner(OwnerRegistration {
                owner: Owner::Data(i),
                keys: vec![(SecretId::DataKey(i), keygen(KeyOwner::DataOwner(i), &mut rng))],
                approvals: policy.approved_by(Owner::Data(i)),
            })
            .unwrap();
        }
        cas.register_owner(OwnerRegistration {
            owner: Owner::Model,
            keys: vec![(SecretId::ModelKey, keygen(KeyOwner::ModelOwner, &mut rng))],
            approvals: policy.approved_by(Owner::Model),
        })
        .unwrap();
        (cas, m, rng)
    }

    #[test]
    fn measurement_sensitivity() {
        let a = CodeIdentity::new("training", "1.0", &["BATCH_SIZE"]);
        assert_eq!(a.measure(), a.clone().measure());
        let mut b = a.clone();
        b.code_version = "1.1".into();
        assert_ne!(a.measure(), b.measure());
        let mut c = a.clone();
        c.placeholders.push("X".into());
        assert_ne!(a.measure(), c.measure());
    }

    #[test]
    fn attestation_examples() {
        let (mut cas, m, _) = setup(4);
        assert!(cas.attest("t2", Role::Training(2), m.training).is_ok());
        let tampered = CodeIdentity::new("training", "1.0", &["BATCH_SIZE "]).measure();
        assert!(cas.attest("t2-evil", Role::Training(2), tampered).is_err());
        assert!(cas.attest("agg", Role::Aggregator, m.training).is_err());
        assert_eq!(cas.attestation_failures().len(), 2);
        assert!(cas.attest("agg2", Role::Aggregator, m.aggregator).is_ok());
    }

    #[test]
    fn provisioning_examples() {
        let (mut cas, m, _) = setup(4);
        cas.attest("t2", Role::Training(2), m.training).unwrap();
        cas.attest("agg", Role::Aggregator, m.aggregator).unwrap();
        cas.attest("adm", Role::Admin, m.admin).unwrap();

        assert!(cas.provision("t2", &SecretId::DataKey(2)).is_ok());
        assert!(matches!(
            cas.provision("t2", &SecretId::DataKey(3)),
            Err(CasError::Denied { rule, .. }) if rule == RULE_DATA_OWNER_ISOLATION
        ));
        for i in 0..4 {
            assert!(matches!(
                cas.provision("agg", &SecretId::DataKey(i)),
                Err(CasError::Denied { rule, .. }) if rule == RULE_DATA_TRAINING_ONLY
            ));
            assert!(cas.provision("adm", &SecretId::DataKey(i)).is_err());
        }
        assert!(cas.provision("agg", &SecretId::ModelKey).is_ok());
        assert!(cas.provision("t2", &SecretId::ModelKey).is_ok());
        assert!(matches!(
            cas.provision("adm", &SecretId::ModelKey),
            Err(CasError::Denied { .. })
        ));

        // repeated request: same key, one log entry
        let k1 = cas.provision("t2", &SecretId::DataKey(2)).unwrap();
        let k2 = cas.provision("t2", &SecretId::DataKey(2)).unwrap();
        assert_eq!(k1, k2);
        assert_eq!(cas.releases().len(), 3);
        assert!(cas.audit().is_empty());
    }

    #[test]
    fn unattested_enclave_gets_nothing() {
        let (mut cas, _, _) = setup(2);
        let evil = CodeIdentity::new("training", "1.0-exfil", &["BATCH_SIZE"]).measure();
        assert!(cas.attest("t0", Role::Training(0), evil).is_err());
        for s in [SecretId::DataKey(0), SecretId::ModelKey] {
            assert!(matches!(cas.provision("t0", &s), Err(CasError::NotAttested(_))));
        }
        assert!(cas.releases().is_empty());
    }

    #[test]
    fn mask_keys_only_reach_their_recipient() {
        let (mut cas, m, mut rng) = setup(3);
        cas.attest("adm", Role::Admin, m.admin).unwrap();
        cas.attest("t0", Role::Training(0), m.training).unwrap();
        cas.attest("t1", Role::Training(1), m.training).unwrap();
        let secret = SecretId::MaskKey { set: 0, index: 1 };
        let key = keygen(secret.key_owner(), &mut rng);
        assert!(cas
            .register_mask_key("t0", secret.clone(), key.clone(), 1)
            .is_err());
        cas.register_mask_key("adm", secret.clone(), key.clone(), 1).unwrap();
        assert!(matches!(
            cas.provision("t0", &secret),
            Err(CasError::Denied { rule, .. }) if rule == RULE_MASK_RECIPIENT
        ));
        assert_eq!(cas.provision("t1", &secret).unwrap(), key);
    }

    #[test]
    fn rules_need_every_approver() {
        let m = measurements();
        let policy = SecretPolicy::standard(2, &m);
        let mut cas = Cas::new();
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        // only data owner 0 registers: its data rule still lacks the model owner
        cas.register_owner(OwnerRegistration {
            owner: Owner::Data(0),
            keys: vec![(SecretId::DataKey(0), keygen(KeyOwner::DataOwner(0), &mut rng))],
            approvals: policy.approved_by(Owner::Data(0)),
        })
        .unwrap();
        assert!(cas.attest("t0", Role::Training(0), m.training).is_err());
    }

    #[test]
    fn structural_rules_cannot_be_overridden() {
        let m = measurements();
        let leak = PolicyRule {
            id: "leak".into(),
            secret: SecretPattern::Data(0),
            role: RolePattern::Aggregator,
            measurement: m.aggregator,
            approvers: BTreeSet::from([Owner::Model]),
        };
        assert!(leak.check_structure().is_err());
        let co_approved = PolicyRule {
            id: "agg".into(),
            secret: SecretPattern::Model,
            role: RolePattern::Aggregator,
            measurement: m.aggregator,
            approvers: BTreeSet::from([Owner::Model, Owner::Data(0)]),
        };
        assert!(co_approved.check_structure().is_err());
        let cross = PolicyRule {
            id: "cross".into(),
            secret: SecretPattern::Data(1),
            role: RolePattern::Training(0),
            measurement: m.training,
            approvers: BTreeSet::from([Owner::Model, Owner::Data(1)]),
        };
        assert!(cross.check_structure().is_err());
    }

    #[test]
    fn owners_register_once() {
        let (mut cas, _, mut rng) = setup(2);
        assert_eq!(cas.owner_message_count(Owner::Data(0)), 1);
        assert_eq!(cas.owner_message_count(Owner::Model), 1);
        let again = cas.register_owner(OwnerRegistration {
            owner: Owner::Data(0),
            keys: vec![(SecretId::DataKey(0), keygen(KeyOwner::DataOwner(0), &mut rng))],
            approvals: vec![],
        });
        assert!(matches!(again, Err(CasError::DuplicateRegistration(_))));
    }

    #[test]
    fn policy_file_round_trip() {
        let policy = SecretPolicy::standard(2, &measurements());
        let text = policy.to_toml();
        assert!(text.contains("training-*"));
        assert_eq!(SecretPolicy::from_toml(&text).unwrap(), policy);
        let bad = text.replace("role = \"training-0\"", "role = \"aggregator\"");
        assert!(SecretPolicy::from_toml(&bad).is_err());
    }

    #[test]
    fn session_keys_are_shared_by_the_pair() {
        let (mut cas, m, mut rng) = setup(2);
        cas.attest("t0", Role::Training(0), m.training).unwrap();
        cas.attest("agg", Role::Aggregator, m.aggregator).unwrap();
        let a = cas.session_key("t0", Role::Aggregator, &mut rng).unwrap();
        let b = cas.session_key("agg", Role::Training(0), &mut rng).unwrap();
        assert_eq!(a, b);
        assert!(cas
            .provision("agg", &SecretId::session(Role::Training(0), Role::Training(1)))
            .is_err());
    }
}
