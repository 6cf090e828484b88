//! `Registry::check` against a brute-force oracle over all 2^7 combinations
//! of its seven conditions.

use pdgate_core::crypto::{Role, Signer};
use pdgate_core::registry::{Basis, Decision, DenyReason, Registry};
use pdgate_core::{FieldClass, Operation, Scope, VirtualId};

const NOW: u64 = 1_000;

struct Case {
    exists: bool,
    active: bool,
    in_window: bool,
    scope_ok: bool,
    purpose_ok: bool,
    manifest_ok: bool,
    consent_ok: bool,
}

impl Case {
    fn from_bits(bits: u8) -> Self {
        let b = |i: u8| bits & (1 << i) != 0;
        Case {
            exists: b(0),
            active: b(1),
            in_window: b(2),
            scope_ok: b(3),
            purpose_ok: b(4),
            manifest_ok: b(5),
            consent_ok: b(6),
        }
    }

    /// The first false condition in check order, else Allow.
    fn oracle(&self) -> Decision {
        let conds = [
            self.exists,
            self.active,
            self.in_window,
            self.scope_ok,
            self.purpose_ok,
            self.manifest_ok,
            self.consent_ok,
        ];
        match conds.iter().position(|c| !c) {
            Some(i) => Decision::Deny(DenyReason::ORDER[i]),
            None => Decision::Allow,
        }
    }

    fn evaluate(&self) -> Decision {
        let mut reg = Registry::new(Signer::from_seed("regulator", Role::Regulator, [1; 32]));
        reg.register_purpose("TAX", "tax assessment").unwrap();
        reg.register_purpose("OTHER", "something else").unwrap();
        let granted = Scope::new(Operation::Read, ["tax"], [FieldClass::Financial]);
        let subject = VirtualId::new("consent", 77);
        let auth = reg.grant("controller", granted.clone(), "TAX", Basis::Consent, 500, 1_500).unwrap();
        if !self.active {
            reg.revoke(&auth.auth_id).unwrap();
        }
        if self.consent_ok {
            reg.record_consent(&subject, "TAX", 10).unwrap();
        }
        let artifact = b"program bytes";
        let manifest = reg.sign_program("prog", artifact, "TAX", granted.clone()).unwrap();
        let digest = if self.manifest_ok { manifest.content_digest } else { [0xee; 32] };
        let auth_id = if self.exists { auth.auth_id } else { "auth-9999".into() };
        let now = if self.in_window { NOW } else { 1_500 };
        let requested = if self.scope_ok {
            granted
        } else {
            Scope::new(Operation::Read, ["tax"], [FieldClass::Financial, FieldClass::Health])
        };
        let purpose = if self.purpose_ok { "TAX" } else { "OTHER" };
        reg.check(&auth_id, &digest, &requested, purpose, &subject, now)
    }
}

#[test]
fn check_matches_conjunction_oracle_on_all_combinations() {
    let mut allows = 0;
    for bits in 0..128u8 {
        let case = Case::from_bits(bits);
        let (got, want) = (case.evaluate(), case.oracle());
        assert_eq!(got, want, "combination {bits:07b}");
        allows += usize::from(got == Decision::Allow);
    }
    assert_eq!(allows, 1);
}

#[test]
fn check_is_pure() {
    let case = Case::from_bits(0b111_1111);
    assert_eq!(case.evaluate(), case.evaluate());
}
