#include "ctrv/analysis.hpp"

#include "ctrv/fnv.hpp"

#include <json.hpp>

#include <algorithm>
#include <bit>
#include <map>
#include <set>
#include <sstream>
#include <tuple>

namespace ctrv::analysis {

namespace {

constexpr size_t kMaxContextDepth = 64;

struct Key {
    uint64_t ctx;
    trace::CodeRef instr;
    LeakKind kind;

    bool operator<(const Key& other) const {
        return std::tie(instr, kind, ctx) < std::tie(other.instr, other.kind, other.ctx);
    }
};

// Call stack as a rolling identity: push on calls, pop on returns, reset if
// a return arrives with nothing pushed. Depth beyond the cap folds into the
// deepest tracked frame.
class ContextTracker {
public:
    uint64_t hash() const {
        uint64_t h = kFnvBasis;
        size_t n = std::min(sites_.size(), kMaxContextDepth);
        for (size_t i = 0; i < n; ++i)
            h = fnv1aU64(h, sites_[i]);
        return h;
    }

    void call(const trace::CodeRef& site) {
        uint64_t h = fnv1aU32(kFnvBasis, site.imageIndex);
        sites_.push_back(fnv1aU64(h, site.offset));
    }

    void ret() {
        if (sites_.empty())
            return;
        sites_.pop_back();
    }

private:
    std::vector<uint64_t> sites_;
};

std::string hex(uint64_t v) {
    std::ostringstream out;
    out << "0x" << std::hex << v;
    return out.str();
}

uint64_t digestBranch(uint64_t digest, const trace::BranchEntry& entry) {
    digest = fnv1aU8(digest, entry.taken ? 1 : 0);
    if (entry.target) {
        digest = fnv1aU32(digest, entry.target->imageIndex);
        digest = fnv1aU64(digest, entry.target->offset);
    } else {
        digest = fnv1aU8(digest, 0xFF);
    }
    return digest;
}

uint64_t digestAccess(uint64_t digest, const trace::MemAccessEntry& entry) {
    digest = fnv1aU8(digest, static_cast<uint8_t>(entry.ref.kind));
    digest = fnv1aU64(digest, entry.ref.id);
    digest = fnv1aU64(digest, entry.ref.offset);
    return digest;
}

using DigestMap = std::map<Key, uint64_t>;

DigestMap digestTestcase(const trace::CanonicalTrace& tc) {
    DigestMap digests;
    ContextTracker context;
    for (const auto& entry : tc.entries) {
        std::visit(
            [&](const auto& e) {
                using T = std::decay_t<decltype(e)>;
                if constexpr (std::is_same_v<T, trace::BranchEntry>) {
                    Key key{context.hash(), e.source, LeakKind::ControlFlow};
                    auto [it, inserted] = digests.try_emplace(key, kFnvBasis);
                    it->second = digestBranch(it->second, e);
                    if (e.kind == isa::BranchKind::Call)
                        context.call(e.source);
                    else if (e.kind == isa::BranchKind::Return)
                        context.ret();
                } else {
                    Key key{context.hash(), e.instr, LeakKind::MemoryAccess};
                    auto [it, inserted] = digests.try_emplace(key, kFnvBasis);
                    it->second = digestAccess(it->second, e);
                }
            },
            entry);
    }
    return digests;
}

}  // namespace

const char* leakKindName(LeakKind kind) {
    return kind == LeakKind::ControlFlow ? "ControlFlow" : "MemoryAccess";
}

TooFewTraces::TooFewTraces(size_t count)
    : AnalysisError("analysis needs at least 2 test-case traces, got " +
                    std::to_string(count)) {}

ImageMismatch::ImageMismatch(size_t traceIndex, uint64_t expected, uint64_t actual)
    : AnalysisError("trace " + std::to_string(traceIndex) +
                    " was recorded against different images (fingerprint " + hex(actual) +
                    ", expected " + hex(expected) + ")") {}

AnalysisReport analyze(std::span<const trace::CanonicalTrace> testcases,
                       std::span<const trace::ImageInfo> images) {
    if (testcases.size() < 2)
        throw TooFewTraces(testcases.size());
    uint64_t expected = trace::imagesFingerprint(images);
    for (size_t i = 0; i < testcases.size(); ++i) {
        if (testcases[i].imagesFingerprint != expected)
            throw ImageMismatch(i, expected, testcases[i].imagesFingerprint);
    }

    std::vector<DigestMap> perTestcase;
    perTestcase.reserve(testcases.size());
    for (const auto& tc : testcases)
        perTestcase.push_back(digestTestcase(tc));

    std::map<Key, std::map<size_t, uint64_t>> merged;
    for (size_t i = 0; i < perTestcase.size(); ++i) {
        for (const auto& [key, digest] : perTestcase[i])
            merged[key][i] = digest;
    }

    AnalysisReport report;
    report.testcaseCount = testcases.size();
    report.images.assign(images.begin(), images.end());

    std::map<std::pair<trace::CodeRef, LeakKind>, LeakageFinding> findings;
    for (const auto& [key, seen] : merged) {
        std::set<uint64_t> distinct;
        for (const auto& [tc, digest] : seen)
            distinct.insert(digest);
        bool unreached = seen.size() < testcases.size();
        uint64_t behaviors = distinct.size() + (unreached ? 1 : 0);
        if (behaviors < 2)
            continue;

        std::ostringstream witness;
        witness << behaviors << " behaviors across " << testcases.size() << " test cases";
        if (!distinct.empty()) {
            witness << " (digest " << hex(*distinct.begin());
            if (distinct.size() > 1)
                witness << " vs " << hex(*std::next(distinct.begin()));
            else
                witness << " vs unreached";
            witness << ")";
        }

        auto& finding = findings[{key.instr, key.kind}];
        finding.instr = key.instr;
        finding.kind = key.kind;
        finding.contexts.push_back({key.ctx, behaviors, witness.str()});
    }

    for (auto& [id, finding] : findings) {
        uint64_t maxBehaviors = 0;
        for (const auto& ctx : finding.contexts)
            maxBehaviors = std::max(maxBehaviors, ctx.distinctDigests);
        finding.severityBits =
            maxBehaviors ? static_cast<uint32_t>(std::bit_width(maxBehaviors) - 1) : 0;
        std::sort(finding.contexts.begin(), finding.contexts.end(),
                  [](const ContextFinding& a, const ContextFinding& b) {
                      return a.contextHash < b.contextHash;
                  });
        report.totalLeakages += finding.contexts.size();
        report.findings.push_back(std::move(finding));
    }

    std::set<trace::CodeRef> uniqueInstrs;
    for (const auto& finding : report.findings)
        uniqueInstrs.insert(finding.instr);
    report.uniqueLeakages = uniqueInstrs.size();
    return report;
}

namespace {

std::string describeInstr(const trace::CodeRef& instr, const SymbolResolver& symbols) {
    std::string text = trace::formatCodeRef(instr);
    if (symbols) {
        if (auto name = symbols(instr))
            text += " (" + *name + ")";
    }
    return text;
}

}  // namespace

std::string renderText(const AnalysisReport& report, const SymbolResolver& symbols) {
    std::ostringstream out;
    out << "Leakage analysis: " << report.testcaseCount << " test cases, "
        << report.images.size() << " image(s)\n";
    for (const auto& image : report.images) {
        out << "  image #" << image.index << ": " << image.path << " ("
            << (image.end - image.start) << " bytes)\n";
    }
    out << "Total leakages: " << report.totalLeakages << "\n";
    out << "Unique leaking instructions: " << report.uniqueLeakages << "\n";
    if (report.findings.empty()) {
        out << "No leakage detected.\n";
        return out.str();
    }
    out << "\n";
    size_t n = 0;
    for (const auto& finding : report.findings) {
        out << "#" << ++n << " "
            << (finding.kind == LeakKind::ControlFlow ? "control-flow" : "memory-access")
            << " leak at " << describeInstr(finding.instr, symbols) << "\n";
        out << "   severity: " << finding.severityBits << " bit(s)\n";
        for (const auto& ctx : finding.contexts) {
            out << "   context " << hex(ctx.contextHash) << ": " << ctx.witness << "\n";
        }
    }
    return out.str();
}

std::string renderJson(const AnalysisReport& report, const SymbolResolver& symbols) {
    nlohmann::ordered_json doc;
    doc["version"] = 1;
    doc["testcaseCount"] = report.testcaseCount;
    doc["totalLeakages"] = report.totalLeakages;
    doc["uniqueLeakages"] = report.uniqueLeakages;
    doc["images"] = nlohmann::ordered_json::array();
    for (const auto& image : report.images) {
        doc["images"].push_back({{"index", image.index},
                                 {"path", image.path},
                                 {"size", image.end - image.start}});
    }
    doc["findings"] = nlohmann::ordered_json::array();
    for (const auto& finding : report.findings) {
        nlohmann::ordered_json item;
        item["kind"] = leakKindName(finding.kind);
        nlohmann::ordered_json instr;
        if (finding.instr.imageIndex != trace::kNoImage)
            instr["image"] = finding.instr.imageIndex;
        else
            instr["image"] = nullptr;
        instr["offset"] = finding.instr.offset;
        instr["display"] = trace::formatCodeRef(finding.instr);
        if (symbols) {
            if (auto name = symbols(finding.instr))
                instr["symbol"] = *name;
        }
        item["instruction"] = instr;
        item["severityBits"] = finding.severityBits;
        item["contexts"] = nlohmann::ordered_json::array();
        for (const auto& ctx : finding.contexts) {
            item["contexts"].push_back({{"contextHash", hex(ctx.contextHash)},
                                        {"distinctDigests", ctx.distinctDigests},
                                        {"witness", ctx.witness}});
        }
        doc["findings"].push_back(item);
    }
    return doc.dump(2) + "\n";
}

}  // namespace ctrv::analysis
