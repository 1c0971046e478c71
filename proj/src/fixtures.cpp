#include "ctrv/guestkit.hpp"

#include "fixtures_data.hpp"

#include <map>
#include <mutex>

namespace ctrv::guestkit {

namespace {

struct CatalogEntry {
    const char* body;
    FixtureManifest manifest;
};

const std::map<std::string, CatalogEntry>& catalog() {
    static const std::map<std::string, CatalogEntry> entries = {
        {"alloc_roundtrip", {data::kAllocRoundtripSource, {0, 0, {}}}},
        {"atomic_loop", {data::kAtomicLoopSource, {0, 0, {}}}},
        {"ct_xor", {data::kCtXorSource, {0, 0, {}}}},
        {"isa_mix", {data::kIsaMixSource, {0, 0, {}}}},
        {"leaky_branch", {data::kLeakyBranchSource, {1, 1, {"ControlFlow"}}}},
        {"leaky_sbox", {data::kLeakySboxSource, {1, 1, {"MemoryAccess"}}}},
        {"loop1000", {data::kLoop1000Source, {0, 0, {}}}},
        {"rvc_mix", {data::kRvcMixSource, {0, 0, {}}}},
        {"two_context_leak", {data::kTwoContextLeakSource, {2, 1, {"ControlFlow"}}}},
    };
    return entries;
}

const CatalogEntry& entryFor(const std::string& name) {
    const auto& entries = catalog();
    auto it = entries.find(name);
    if (it == entries.end())
        throw UnknownFixture(name);
    return it->second;
}

}  // namespace

std::vector<std::string> fixtureNames() {
    std::vector<std::string> names;
    for (const auto& [name, entry] : catalog())
        names.push_back(name);
    return names;
}

const std::string& fixtureSource(const std::string& name) {
    static std::map<std::string, std::string> sources;
    static std::mutex lock;
    std::scoped_lock guard(lock);
    auto it = sources.find(name);
    if (it == sources.end()) {
        const auto& entry = entryFor(name);
        std::string full = std::string(data::kRuntimeSource) + "\n" + entry.body;
        it = sources.emplace(name, std::move(full)).first;
    }
    return it->second;
}

Fixture buildFixture(const std::string& name) {
    static std::map<std::string, Fixture> built;
    static std::mutex lock;
    const auto& entry = entryFor(name);
    const std::string& source = fixtureSource(name);
    std::scoped_lock guard(lock);
    auto it = built.find(name);
    if (it == built.end()) {
        Fixture fixture;
        fixture.name = name;
        fixture.elf = assemble(source);
        fixture.manifest = entry.manifest;
        it = built.emplace(name, std::move(fixture)).first;
    }
    return it->second;
}

}  // namespace ctrv::guestkit
