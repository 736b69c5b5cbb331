use std::collections::HashMap;
use std::sync::Arc;

use super::{ConnectivityType, Did, DidDocument, IdentityError, IdentityHub, Revision};
use crate::crypto::{PublicKey, Signer};
use crate::time::Timestamp;

/// Anything that maps DIDs to their current documents.
pub trait DidResolver: Send + Sync {
    fn resolve(&self, did: &Did) -> Result<DidDocument, IdentityError>;
}

/// One DID method: how its documents are published and looked up.
pub trait MethodPlugin: Send + Sync {
    fn method(&self) -> &str;
    fn publish(&self, doc: DidDocument) -> Result<Revision, IdentityError>;
    fn resolve(&self, did: &Did) -> Result<DidDocument, IdentityError>;
}

/// A method whose documents live in an [`IdentityHub`].
pub struct HubPlugin {
    method: String,
    hub: Arc<IdentityHub>,
}

impl HubPlugin {
    pub fn new(method: impl Into<String>, hub: Arc<IdentityHub>) -> Self {
        Self { method: method.into(), hub }
    }
}

impl MethodPlugin for HubPlugin {
    fn method(&self) -> &str {
        &self.method
    }

    fn publish(&self, doc: DidDocument) -> Result<Revision, IdentityError> {
        self.hub.store(doc)
    }

    fn resolve(&self, did: &Did) -> Result<DidDocument, IdentityError> {
        self.hub.fetch(did)
    }
}

/// Dispatches DIDs to the plugin registered for their method. The plugin
/// set is fixed once built.
#[derive(Clone)]
pub struct Resolver {
    plugins: Arc<HashMap<String, Arc<dyn MethodPlugin>>>,
}

#[derive(Default)]
pub struct ResolverBuilder {
    plugins: HashMap<String, Arc<dyn MethodPlugin>>,
}

impl ResolverBuilder {
    pub fn plugin(mut self, plugin: Arc<dyn MethodPlugin>) -> Result<Self, IdentityError> {
        let method = plugin.method().to_owned();
        if self.plugins.contains_key(&method) {
            return Err(IdentityError::DuplicateMethod(method));
        }
        self.plugins.insert(method, plugin);
        Ok(self)
    }

    pub fn hub(self, method: &str, hub: Arc<IdentityHub>) -> Result<Self, IdentityError> {
        self.plugin(Arc::new(HubPlugin::new(method, hub)))
    }

    pub fn build(self) -> Resolver {
        Resolver { plugins: Arc::new(self.plugins) }
    }
}

impl Resolver {
    pub fn builder() -> ResolverBuilder {
        ResolverBuilder::default()
    }

    /// A resolver with one local `iotx` method over the given hub.
    pub fn local(hub: Arc<IdentityHub>) -> Self {
        Self::builder().hub(super::LOCAL_METHOD, hub).expect("single plugin").build()
    }

    fn plugin(&self, method: &str) -> Result<&Arc<dyn MethodPlugin>, IdentityError> {
        self.plugins.get(method).ok_or_else(|| IdentityError::UnknownMethod(method.to_owned()))
    }

    pub fn has_method(&self, method: &str) -> bool {
        self.plugins.contains_key(method)
    }

    /// Creates, self-signs and publishes a new DID document.
    pub fn create_did(
        &self,
        method: &str,
        public_key: &PublicKey,
        services: &[(ConnectivityType, String)],
        signer: &dyn Signer,
        created: Timestamp,
    ) -> Result<DidDocument, IdentityError> {
        let plugin = self.plugin(method)?;
        if signer.public_key() != *public_key {
            return Err(IdentityError::SignerMismatch);
        }
        let doc = DidDocument::build(method, signer, services, created)?;
        plugin.publish(doc.clone())?;
        Ok(doc)
    }

    /// Publishes an already signed document through its method's plugin.
    pub fn publish(&self, doc: DidDocument) -> Result<Revision, IdentityError> {
        self.plugin(doc.id.method())?.publish(doc)
    }
}

impl DidResolver for Resolver {
    fn resolve(&self, did: &Did) -> Result<DidDocument, IdentityError> {
        self.plugin(did.method())?.resolve(did)
    }
}

impl<T: DidResolver + ?Sized> DidResolver for Arc<T> {
    fn resolve(&self, did: &Did) -> Result<DidDocument, IdentityError> {
        (**self).resolve(did)
    }
}

impl std::fmt::Debug for Resolver {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let mut methods: Vec<&String> = self.plugins.keys().collect();
        methods.sort();
        f.debug_struct("Resolver").field("methods", &methods).finish()
    }
}
