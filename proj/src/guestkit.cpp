#include "ctrv/guestkit.hpp"

#include <algorithm>
#include <cctype>
#include <charconv>
#include <cstring>
#include <optional>
#include <set>
#include <span>
#include <sstream>

namespace ctrv::guestkit {

namespace {

constexpr uint64_t kTextBase = 0x10000;
constexpr uint64_t kMinDataBase = 0x20000;
constexpr uint64_t kPage = 0x1000;

uint64_t alignUp(uint64_t v, uint64_t a) { return (v + a - 1) & ~(a - 1); }

const std::map<std::string, uint8_t>& registerNames() {
    static const std::map<std::string, uint8_t> names = [] {
        std::map<std::string, uint8_t> m;
        for (int i = 0; i < 32; ++i) m["x" + std::to_string(i)] = static_cast<uint8_t>(i);
        m["zero"] = 0; m["ra"] = 1; m["sp"] = 2; m["gp"] = 3; m["tp"] = 4;
        m["t0"] = 5; m["t1"] = 6; m["t2"] = 7;
        m["s0"] = 8; m["fp"] = 8; m["s1"] = 9;
        for (int i = 0; i < 8; ++i) m["a" + std::to_string(i)] = static_cast<uint8_t>(10 + i);
        for (int i = 2; i < 12; ++i) m["s" + std::to_string(i)] = static_cast<uint8_t>(16 + i);
        for (int i = 3; i < 7; ++i) m["t" + std::to_string(i)] = static_cast<uint8_t>(25 + i);
        return m;
    }();
    return names;
}

struct Item {
    enum class Kind { Instr, Bytes, Align };
    Kind kind = Kind::Instr;
    size_t line = 0;
    int section = 0;  // 0 text, 1 data
    std::string mnemonic;
    std::vector<std::string> ops;
    std::vector<uint8_t> bytes;
    unsigned alignPow = 0;
    uint64_t addr = 0;
    uint32_t size = 0;
};

struct NumericLabel {
    int num;
    int section;
    size_t itemIndex;
    uint64_t addr = 0;
};

class Assembler {
public:
    AsmProgram run(std::string_view source) {
        parse(source);
        layout();
        encode();
        return std::move(program_);
    }

private:
    [[noreturn]] void fail(const std::string& msg) { throw AsmError(msg, line_); }

    // ---- parsing ----

    void parse(std::string_view source) {
        size_t pos = 0;
        line_ = 0;
        while (pos <= source.size()) {
            size_t nl = source.find('\n', pos);
            std::string_view raw = source.substr(pos, nl == std::string_view::npos
                                                          ? std::string_view::npos
                                                          : nl - pos);
            pos = nl == std::string_view::npos ? source.size() + 1 : nl + 1;
            ++line_;
            parseLine(raw);
        }
    }

    void parseLine(std::string_view raw) {
        if (size_t hash = raw.find('#'); hash != std::string_view::npos)
            raw = raw.substr(0, hash);
        std::string lineStr{raw};

        // Peel off any number of leading "label:" prefixes.
        for (;;) {
            size_t colon = lineStr.find(':');
            if (colon == std::string::npos) break;
            std::string candidate = trim(lineStr.substr(0, colon));
            if (candidate.empty() || !isLabelName(candidate)) break;
            defineLabel(candidate);
            lineStr = lineStr.substr(colon + 1);
        }

        std::string text = trim(lineStr);
        if (text.empty()) return;

        if (text[0] == '.') {
            directive(text);
            return;
        }

        Item item;
        item.line = line_;
        item.section = section_;
        size_t sp = text.find_first_of(" \t");
        item.mnemonic = text.substr(0, sp);
        if (sp != std::string::npos) item.ops = splitOperands(text.substr(sp + 1));
        if (section_ != 0) fail("instructions are only allowed in .text");
        items_.push_back(std::move(item));
    }

    static std::string trim(std::string s) {
        size_t b = s.find_first_not_of(" \t\r");
        size_t e = s.find_last_not_of(" \t\r");
        return b == std::string::npos ? "" : s.substr(b, e - b + 1);
    }

    static bool isLabelName(const std::string& s) {
        for (char c : s)
            if (!std::isalnum(static_cast<unsigned char>(c)) && c != '_' && c != '.') return false;
        return true;
    }

    static std::vector<std::string> splitOperands(const std::string& s) {
        std::vector<std::string> out;
        std::string cur;
        int depth = 0;
        for (char c : s) {
            if (c == '(') ++depth;
            if (c == ')') --depth;
            if (c == ',' && depth == 0) {
                out.push_back(trim(cur));
                cur.clear();
            } else {
                cur.push_back(c);
            }
        }
        if (std::string t = trim(cur); !t.empty()) out.push_back(t);
        return out;
    }

    void defineLabel(const std::string& name) {
        bool numeric = std::all_of(name.begin(), name.end(),
                                   [](char c) { return std::isdigit(static_cast<unsigned char>(c)); });
        if (numeric) {
            numericLabels_.push_back({std::stoi(name), section_, items_.size()});
            return;
        }
        if (labelDefs_.count(name)) fail("duplicate label '" + name + "'");
        labelDefs_[name] = {section_, items_.size()};
    }

    void directive(const std::string& text) {
        std::istringstream is(text);
        std::string name;
        is >> name;
        std::string rest = trim(text.substr(name.size()));

        if (name == ".text") { section_ = 0; return; }
        if (name == ".data") { section_ = 1; return; }
        if (name == ".global" || name == ".globl") {
            if (rest.empty()) fail(".global needs a symbol name");
            program_.exported.push_back(rest);
            return;
        }
        if (name == ".align") {
            if (section_ != 1) fail(".align is only supported in .data");
            Item item;
            item.kind = Item::Kind::Align;
            item.line = line_;
            item.section = section_;
            item.alignPow = static_cast<unsigned>(parseInt(rest));
            items_.push_back(std::move(item));
            return;
        }
        if (name == ".byte" || name == ".half" || name == ".word" || name == ".dword" ||
            name == ".zero" || name == ".ascii" || name == ".asciz") {
            if (section_ != 1) fail(name + " is only supported in .data");
            Item item;
            item.kind = Item::Kind::Bytes;
            item.line = line_;
            item.section = section_;
            if (name == ".zero") {
                item.bytes.assign(static_cast<size_t>(parseInt(rest)), 0);
            } else if (name == ".ascii" || name == ".asciz") {
                item.bytes = parseString(rest);
                if (name == ".asciz") item.bytes.push_back(0);
            } else {
                unsigned width = name == ".byte" ? 1 : name == ".half" ? 2 : name == ".word" ? 4 : 8;
                for (const std::string& op : splitOperands(rest)) {
                    uint64_t v = static_cast<uint64_t>(parseInt(op));
                    for (unsigned i = 0; i < width; ++i)
                        item.bytes.push_back(static_cast<uint8_t>(v >> (8 * i)));
                }
            }
            items_.push_back(std::move(item));
            return;
        }
        fail("unknown directive " + name);
    }

    std::vector<uint8_t> parseString(const std::string& s) {
        if (s.size() < 2 || s.front() != '"' || s.back() != '"')
            fail("expected a quoted string");
        std::vector<uint8_t> out;
        for (size_t i = 1; i + 1 < s.size(); ++i) {
            char c = s[i];
            if (c == '\\' && i + 2 < s.size() + 1) {
                char e = s[++i];
                switch (e) {
                case 'n': c = '\n'; break;
                case 't': c = '\t'; break;
                case '0': c = '\0'; break;
                case '\\': c = '\\'; break;
                case '"': c = '"'; break;
                default: fail(std::string("unknown escape \\") + e);
                }
            }
            out.push_back(static_cast<uint8_t>(c));
        }
        return out;
    }

    int64_t parseInt(const std::string& s) {
        std::string t = trim(s);
        if (t.empty()) fail("expected a number");
        bool neg = t[0] == '-';
        size_t start = neg || t[0] == '+' ? 1 : 0;
        int base = 10;
        if (t.size() > start + 1 && t[start] == '0' && (t[start + 1] == 'x' || t[start + 1] == 'X')) {
            base = 16;
            start += 2;
        }
        uint64_t mag = 0;
        auto [p, ec] = std::from_chars(t.data() + start, t.data() + t.size(), mag, base);
        if (ec != std::errc{} || p != t.data() + t.size()) fail("bad number '" + s + "'");
        return neg ? -static_cast<int64_t>(mag) : static_cast<int64_t>(mag);
    }

    // ---- layout ----

    uint32_t sizeOfInstr(const Item& item) {
        const std::string& m = item.mnemonic;
        if (m.rfind("c.", 0) == 0) return 2;
        if (m == "li") {
            int64_t v = parseInt(item.ops.size() == 2 ? item.ops[1] : "");
            if (v >= -2048 && v <= 2047) return 4;
            return 8;
        }
        if (m == "la") return 8;
        return 4;
    }

    void layout() {
        uint64_t text = kTextBase;
        for (Item& item : items_) {
            if (item.section != 0) continue;
            line_ = item.line;
            item.addr = text;
            item.size = sizeOfInstr(item);
            text += item.size;
        }
        program_.textBase = kTextBase;
        uint64_t textEnd = text;

        uint64_t data = std::max<uint64_t>(kMinDataBase, alignUp(textEnd, kPage));
        program_.dataBase = data;
        for (Item& item : items_) {
            if (item.section != 1) continue;
            line_ = item.line;
            if (item.kind == Item::Kind::Align) {
                uint64_t aligned = alignUp(data, uint64_t{1} << item.alignPow);
                item.addr = data;
                item.size = static_cast<uint32_t>(aligned - data);
                data = aligned;
            } else {
                item.addr = data;
                item.size = static_cast<uint32_t>(item.bytes.size());
                data += item.size;
            }
        }

        // Bind labels to the address of the item they precede (or to the
        // section end when trailing).
        auto itemAddr = [&](int section, size_t index) -> uint64_t {
            for (size_t i = index; i < items_.size(); ++i)
                if (items_[i].section == section) return items_[i].addr;
            return section == 0 ? textEnd : data;
        };
        for (auto& [name, def] : labelDefs_)
            program_.labels[name] = itemAddr(def.first, def.second);
        for (NumericLabel& nl : numericLabels_) nl.addr = itemAddr(nl.section, nl.itemIndex);
    }

    // ---- encoding ----

    uint8_t reg(const std::string& s) {
        auto it = registerNames().find(s);
        if (it == registerNames().end()) fail("unknown register '" + s + "'");
        return it->second;
    }

    // Compressed register: x8..x15 encode in three bits.
    uint8_t cReg(const std::string& s) {
        uint8_t r = reg(s);
        if (r < 8 || r > 15) fail("register '" + s + "' is not valid in a compressed encoding");
        return static_cast<uint8_t>(r - 8);
    }

    struct MemOperand {
        int64_t offset;
        uint8_t base;
    };

    MemOperand memOperand(const std::string& s) {
        size_t open = s.find('(');
        size_t close = s.rfind(')');
        if (open == std::string::npos || close == std::string::npos || close < open)
            fail("expected offset(register), got '" + s + "'");
        std::string offStr = trim(s.substr(0, open));
        MemOperand out;
        out.offset = offStr.empty() ? 0 : parseInt(offStr);
        out.base = reg(trim(s.substr(open + 1, close - open - 1)));
        return out;
    }

    uint64_t resolveLabel(const std::string& s, uint64_t fromAddr, size_t itemIndex) {
        // Numeric local references: 1b / 1f.
        if (s.size() >= 2 && std::isdigit(static_cast<unsigned char>(s[0]))) {
            char dir = s.back();
            if (dir == 'b' || dir == 'f') {
                std::string numStr = s.substr(0, s.size() - 1);
                if (std::all_of(numStr.begin(), numStr.end(), [](char c) {
                        return std::isdigit(static_cast<unsigned char>(c));
                    })) {
                    int num = std::stoi(numStr);
                    const NumericLabel* best = nullptr;
                    for (const NumericLabel& nl : numericLabels_) {
                        if (nl.num != num) continue;
                        if (dir == 'b' && nl.itemIndex <= itemIndex &&
                            (!best || nl.itemIndex > best->itemIndex))
                            best = &nl;
                        if (dir == 'f' && nl.itemIndex > itemIndex &&
                            (!best || nl.itemIndex < best->itemIndex))
                            best = &nl;
                    }
                    if (!best) throw UnresolvedLabel("no matching local label '" + s + "'", line_);
                    return best->addr;
                }
            }
        }
        auto it = program_.labels.find(s);
        if (it == program_.labels.end())
            throw UnresolvedLabel("undefined label '" + s + "'", line_);
        (void)fromAddr;
        return it->second;
    }

    void emit32(uint32_t word) {
        for (int i = 0; i < 4; ++i) program_.text.push_back(static_cast<uint8_t>(word >> (8 * i)));
    }

    void emit16(uint16_t half) {
        program_.text.push_back(static_cast<uint8_t>(half));
        program_.text.push_back(static_cast<uint8_t>(half >> 8));
    }

    int64_t checkImm(int64_t v, int bits, const char* what) {
        int64_t lo = -(int64_t{1} << (bits - 1));
        int64_t hi = (int64_t{1} << (bits - 1)) - 1;
        if (v < lo || v > hi) fail(std::string(what) + " immediate out of range");
        return v;
    }

    uint32_t encI(int64_t imm, uint8_t rs1, uint32_t f3, uint8_t rd, uint32_t opc) {
        checkImm(imm, 12, "i-type");
        return (static_cast<uint32_t>(imm & 0xFFF) << 20) | (uint32_t{rs1} << 15) | (f3 << 12) |
               (uint32_t{rd} << 7) | opc;
    }

    uint32_t encS(int64_t imm, uint8_t rs2, uint8_t rs1, uint32_t f3) {
        checkImm(imm, 12, "store");
        uint32_t i = static_cast<uint32_t>(imm & 0xFFF);
        return ((i >> 5) << 25) | (uint32_t{rs2} << 20) | (uint32_t{rs1} << 15) | (f3 << 12) |
               ((i & 0x1F) << 7) | 0x23;
    }

    uint32_t encR(uint32_t f7, uint8_t rs2, uint8_t rs1, uint32_t f3, uint8_t rd, uint32_t opc) {
        return (f7 << 25) | (uint32_t{rs2} << 20) | (uint32_t{rs1} << 15) | (f3 << 12) |
               (uint32_t{rd} << 7) | opc;
    }

    uint32_t encB(int64_t off, uint8_t rs1, uint8_t rs2, uint32_t f3) {
        if (off % 2) fail("branch target is misaligned");
        if (off < -4096 || off > 4094)
            throw BranchOutOfRange("conditional branch target out of range", line_);
        uint32_t i = static_cast<uint32_t>(off & 0x1FFF);
        return (((i >> 12) & 1) << 31) | (((i >> 5) & 0x3F) << 25) | (uint32_t{rs2} << 20) |
               (uint32_t{rs1} << 15) | (f3 << 12) | (((i >> 1) & 0xF) << 8) |
               (((i >> 11) & 1) << 7) | 0x63;
    }

    uint32_t encJ(int64_t off, uint8_t rd) {
        if (off % 2) fail("jump target is misaligned");
        if (off < -(int64_t{1} << 20) || off > (int64_t{1} << 20) - 2)
            throw BranchOutOfRange("jump target out of range", line_);
        uint32_t i = static_cast<uint32_t>(off & 0x1FFFFF);
        return (((i >> 20) & 1) << 31) | (((i >> 1) & 0x3FF) << 21) | (((i >> 11) & 1) << 20) |
               (((i >> 12) & 0xFF) << 12) | (uint32_t{rd} << 7) | 0x6F;
    }

    uint32_t encU(int64_t field, uint8_t rd, uint32_t opc) {
        if (field < 0 || field > 0xFFFFF) fail("20-bit immediate out of range");
        return (static_cast<uint32_t>(field) << 12) | (uint32_t{rd} << 7) | opc;
    }

    void needOps(const Item& item, size_t n) {
        if (item.ops.size() != n)
            fail(item.mnemonic + " expects " + std::to_string(n) + " operand(s)");
    }

    void encode() {
        program_.text.reserve(4096);
        for (size_t idx = 0; idx < items_.size(); ++idx) {
            Item& item = items_[idx];
            line_ = item.line;
            if (item.section == 1) {
                if (item.kind == Item::Kind::Align) {
                    program_.data.insert(program_.data.end(), item.size, 0);
                } else {
                    program_.data.insert(program_.data.end(), item.bytes.begin(),
                                         item.bytes.end());
                }
                continue;
            }
            size_t before = program_.text.size();
            encodeInstr(item, idx);
            if (program_.text.size() - before != item.size)
                fail("internal: size mismatch for " + item.mnemonic);
        }
        if (!program_.labels.count("_start"))
            throw UnresolvedLabel("program has no _start entry point", 0);
        program_.entry = program_.labels.at("_start");
    }

    void encodeInstr(const Item& item, size_t idx);
    void encodeCompressed(const Item& item, size_t idx);

    AsmProgram program_;
    std::vector<Item> items_;
    std::map<std::string, std::pair<int, size_t>> labelDefs_;
    std::vector<NumericLabel> numericLabels_;
    int section_ = 0;
    size_t line_ = 0;
};

struct LoadStoreDef {
    uint32_t funct3;
    bool store;
};

const std::map<std::string, LoadStoreDef>& loadStoreDefs() {
    static const std::map<std::string, LoadStoreDef> defs = {
        {"lb", {0, false}},  {"lh", {1, false}},  {"lw", {2, false}},  {"ld", {3, false}},
        {"lbu", {4, false}}, {"lhu", {5, false}}, {"lwu", {6, false}},
        {"sb", {0, true}},   {"sh", {1, true}},   {"sw", {2, true}},   {"sd", {3, true}},
    };
    return defs;
}

struct AluRegDef {
    uint32_t funct7, funct3, opcode;
};

const std::map<std::string, AluRegDef>& aluRegDefs() {
    static const std::map<std::string, AluRegDef> defs = {
        {"add", {0x00, 0, 0x33}},  {"sub", {0x20, 0, 0x33}},  {"sll", {0x00, 1, 0x33}},
        {"slt", {0x00, 2, 0x33}},  {"sltu", {0x00, 3, 0x33}}, {"xor", {0x00, 4, 0x33}},
        {"srl", {0x00, 5, 0x33}},  {"sra", {0x20, 5, 0x33}},  {"or", {0x00, 6, 0x33}},
        {"and", {0x00, 7, 0x33}},  {"addw", {0x00, 0, 0x3B}}, {"subw", {0x20, 0, 0x3B}},
        {"sllw", {0x00, 1, 0x3B}}, {"srlw", {0x00, 5, 0x3B}}, {"sraw", {0x20, 5, 0x3B}},
        {"mul", {0x01, 0, 0x33}},  {"mulh", {0x01, 1, 0x33}}, {"mulhsu", {0x01, 2, 0x33}},
        {"mulhu", {0x01, 3, 0x33}}, {"div", {0x01, 4, 0x33}}, {"divu", {0x01, 5, 0x33}},
        {"rem", {0x01, 6, 0x33}},  {"remu", {0x01, 7, 0x33}}, {"mulw", {0x01, 0, 0x3B}},
        {"divw", {0x01, 4, 0x3B}}, {"divuw", {0x01, 5, 0x3B}}, {"remw", {0x01, 6, 0x3B}},
        {"remuw", {0x01, 7, 0x3B}},
    };
    return defs;
}

struct AluImmDef {
    uint32_t funct3, opcode;
    int shiftBits;  // 0: plain immediate, 6: 64-bit shift, 5: W shift
    uint32_t shiftHigh;
};

const std::map<std::string, AluImmDef>& aluImmDefs() {
    static const std::map<std::string, AluImmDef> defs = {
        {"addi", {0, 0x13, 0, 0}},   {"slti", {2, 0x13, 0, 0}},  {"sltiu", {3, 0x13, 0, 0}},
        {"xori", {4, 0x13, 0, 0}},   {"ori", {6, 0x13, 0, 0}},   {"andi", {7, 0x13, 0, 0}},
        {"slli", {1, 0x13, 6, 0x00}}, {"srli", {5, 0x13, 6, 0x00}}, {"srai", {5, 0x13, 6, 0x10}},
        {"addiw", {0, 0x1B, 0, 0}},  {"slliw", {1, 0x1B, 5, 0x00}}, {"srliw", {5, 0x1B, 5, 0x00}},
        {"sraiw", {5, 0x1B, 5, 0x20}},
    };
    return defs;
}

struct BranchDef {
    uint32_t funct3;
    bool swap;  // synthesized from the reversed comparison
};

const std::map<std::string, BranchDef>& branchDefs() {
    static const std::map<std::string, BranchDef> defs = {
        {"beq", {0, false}},  {"bne", {1, false}},  {"blt", {4, false}},  {"bge", {5, false}},
        {"bltu", {6, false}}, {"bgeu", {7, false}}, {"bgt", {4, true}},   {"ble", {5, true}},
        {"bgtu", {6, true}},  {"bleu", {7, true}},
    };
    return defs;
}

const std::map<std::string, uint32_t>& amoFunct5() {
    static const std::map<std::string, uint32_t> defs = {
        {"amoswap", 0x01}, {"amoadd", 0x00}, {"amoxor", 0x04}, {"amoand", 0x0C},
        {"amoor", 0x08},   {"amomin", 0x10}, {"amomax", 0x14}, {"amominu", 0x18},
        {"amomaxu", 0x1C},
    };
    return defs;
}

void Assembler::encodeInstr(const Item& item, size_t idx) {
    const std::string& m = item.mnemonic;
    const auto& ops = item.ops;
    const uint64_t pc = item.addr;

    auto target = [&](const std::string& s) -> int64_t {
        return static_cast<int64_t>(resolveLabel(s, pc, idx)) - static_cast<int64_t>(pc);
    };

    // Loads and stores.
    if (auto it = loadStoreDefs().find(m); it != loadStoreDefs().end()) {
        needOps(item, 2);
        MemOperand mem = memOperand(ops[1]);
        if (it->second.store)
            emit32(encS(mem.offset, reg(ops[0]), mem.base, it->second.funct3));
        else
            emit32(encI(mem.offset, mem.base, it->second.funct3, reg(ops[0]), 0x03));
        return;
    }

    // Register-register ALU (including M).
    if (auto it = aluRegDefs().find(m); it != aluRegDefs().end()) {
        needOps(item, 3);
        emit32(encR(it->second.funct7, reg(ops[2]), reg(ops[1]), it->second.funct3, reg(ops[0]),
                    it->second.opcode));
        return;
    }

    // Immediate ALU.
    if (auto it = aluImmDefs().find(m); it != aluImmDefs().end()) {
        needOps(item, 3);
        const AluImmDef& def = it->second;
        int64_t imm = parseInt(ops[2]);
        if (def.shiftBits) {
            int64_t max = (int64_t{1} << def.shiftBits) - 1;
            if (imm < 0 || imm > max) fail("shift amount out of range");
            uint32_t immField = static_cast<uint32_t>(imm) | (def.shiftHigh << (def.shiftBits == 6 ? 6 : 5));
            emit32((immField << 20) | (uint32_t{reg(ops[1])} << 15) | (def.funct3 << 12) |
                   (uint32_t{reg(ops[0])} << 7) | def.opcode);
        } else {
            emit32(encI(imm, reg(ops[1]), def.funct3, reg(ops[0]), def.opcode));
        }
        return;
    }

    // Conditional branches, including reversed-comparison forms.
    if (auto it = branchDefs().find(m); it != branchDefs().end()) {
        needOps(item, 3);
        uint8_t a = reg(ops[0]), b = reg(ops[1]);
        if (it->second.swap) std::swap(a, b);
        emit32(encB(target(ops[2]), a, b, it->second.funct3));
        return;
    }

    // Atomics.
    if (m.rfind("lr.", 0) == 0 || m.rfind("sc.", 0) == 0 || m.rfind("amo", 0) == 0) {
        size_t dot = m.rfind('.');
        std::string base = m.substr(0, dot);
        std::string suffix = m.substr(dot + 1);
        if (suffix != "w" && suffix != "d") fail("unknown mnemonic " + m);
        uint32_t funct3 = suffix == "w" ? 2 : 3;
        if (base == "lr") {
            needOps(item, 2);
            emit32(encR(0x02 << 2, 0, memOperand(ops[1]).base, funct3, reg(ops[0]), 0x2F));
            return;
        }
        if (base == "sc") {
            needOps(item, 3);
            emit32(encR(0x03 << 2, reg(ops[1]), memOperand(ops[2]).base, funct3, reg(ops[0]),
                        0x2F));
            return;
        }
        if (auto amoIt = amoFunct5().find(base); amoIt != amoFunct5().end()) {
            needOps(item, 3);
            emit32(encR(amoIt->second << 2, reg(ops[1]), memOperand(ops[2]).base, funct3,
                        reg(ops[0]), 0x2F));
            return;
        }
        fail("unknown mnemonic " + m);
    }

    // Jumps.
    if (m == "jal") {
        if (ops.size() == 1) { emit32(encJ(target(ops[0]), 1)); return; }
        needOps(item, 2);
        emit32(encJ(target(ops[1]), reg(ops[0])));
        return;
    }
    if (m == "jalr") {
        if (ops.size() == 1) { emit32(encI(0, reg(ops[0]), 0, 1, 0x67)); return; }
        needOps(item, 2);
        MemOperand mem = memOperand(ops[1]);
        emit32(encI(mem.offset, mem.base, 0, reg(ops[0]), 0x67));
        return;
    }
    if (m == "j") { needOps(item, 1); emit32(encJ(target(ops[0]), 0)); return; }
    if (m == "jr") { needOps(item, 1); emit32(encI(0, reg(ops[0]), 0, 0, 0x67)); return; }
    if (m == "call") { needOps(item, 1); emit32(encJ(target(ops[0]), 1)); return; }
    if (m == "ret") { needOps(item, 0); emit32(encI(0, 1, 0, 0, 0x67)); return; }

    // Upper immediates.
    if (m == "lui") { needOps(item, 2); emit32(encU(parseInt(ops[1]), reg(ops[0]), 0x37)); return; }
    if (m == "auipc") { needOps(item, 2); emit32(encU(parseInt(ops[1]), reg(ops[0]), 0x17)); return; }

    // System.
    if (m == "ecall") { emit32(0x00000073); return; }
    if (m == "ebreak") { emit32(0x00100073); return; }
    if (m == "fence") { emit32(0x0FF0000F); return; }
    if (m == "fence.i") { emit32(0x0000100F); return; }
    if (m == "csrr") {
        needOps(item, 2);
        int64_t csr = parseInt(ops[1]);
        if (csr < 0 || csr > 0xFFF) fail("csr number out of range");
        // csrrs rd, csr, x0; the csr field is unsigned, unlike i-type imm
        emit32((static_cast<uint32_t>(csr) << 20) | (2u << 12) |
               (uint32_t{reg(ops[0])} << 7) | 0x73u);
        return;
    }

    // Pseudo-instructions.
    if (m == "nop") { emit32(0x00000013); return; }
    if (m == "mv") {
        needOps(item, 2);
        emit32(encI(0, reg(ops[1]), 0, reg(ops[0]), 0x13));
        return;
    }
    if (m == "li") {
        needOps(item, 2);
        int64_t v = parseInt(ops[1]);
        uint8_t rd = reg(ops[0]);
        if (v >= -2048 && v <= 2047) {
            emit32(encI(v, 0, 0, rd, 0x13));
            return;
        }
        if (v < INT32_MIN || v > INT32_MAX) fail("li immediate exceeds 32 bits");
        // lui + addiw, with wrap-around adjustment for the low half.
        int32_t v32 = static_cast<int32_t>(v);
        uint32_t hi = (static_cast<uint32_t>(v32) + 0x800) & 0xFFFFF000;
        int32_t lo = static_cast<int32_t>(static_cast<uint32_t>(v32) - hi);
        emit32(encU(hi >> 12, rd, 0x37));
        emit32(encI(lo, rd, 0, rd, 0x1B));
        return;
    }
    if (m == "la") {
        needOps(item, 2);
        uint64_t addr = resolveLabel(ops[1], pc, idx);
        if (addr >= (uint64_t{1} << 31)) fail("la target above 2 GiB");
        uint8_t rd = reg(ops[0]);
        uint32_t hi = (static_cast<uint32_t>(addr) + 0x800) & 0xFFFFF000;
        int32_t lo = static_cast<int32_t>(static_cast<uint32_t>(addr) - hi);
        emit32(encU(hi >> 12, rd, 0x37));
        emit32(encI(lo, rd, 0, rd, 0x13));
        return;
    }
    if (m == "beqz") { needOps(item, 2); emit32(encB(target(ops[1]), reg(ops[0]), 0, 0)); return; }
    if (m == "bnez") { needOps(item, 2); emit32(encB(target(ops[1]), reg(ops[0]), 0, 1)); return; }
    if (m == "blez") { needOps(item, 2); emit32(encB(target(ops[1]), 0, reg(ops[0]), 5)); return; }
    if (m == "bgez") { needOps(item, 2); emit32(encB(target(ops[1]), reg(ops[0]), 0, 5)); return; }
    if (m == "bltz") { needOps(item, 2); emit32(encB(target(ops[1]), reg(ops[0]), 0, 4)); return; }
    if (m == "bgtz") { needOps(item, 2); emit32(encB(target(ops[1]), 0, reg(ops[0]), 4)); return; }
    if (m == "not") { needOps(item, 2); emit32(encI(-1, reg(ops[1]), 4, reg(ops[0]), 0x13)); return; }
    if (m == "neg") { needOps(item, 2); emit32(encR(0x20, reg(ops[1]), 0, 0, reg(ops[0]), 0x33)); return; }
    if (m == "seqz") { needOps(item, 2); emit32(encI(1, reg(ops[1]), 3, reg(ops[0]), 0x13)); return; }
    if (m == "snez") { needOps(item, 2); emit32(encR(0, reg(ops[1]), 0, 3, reg(ops[0]), 0x33)); return; }
    if (m == "sext.w") { needOps(item, 2); emit32(encI(0, reg(ops[1]), 0, reg(ops[0]), 0x1B)); return; }

    if (m.rfind("c.", 0) == 0) {
        encodeCompressed(item, idx);
        return;
    }

    throw UnknownMnemonic("unknown mnemonic '" + m + "'", line_);
}

void Assembler::encodeCompressed(const Item& item, size_t idx) {
    const std::string& m = item.mnemonic;
    const auto& ops = item.ops;
    const uint64_t pc = item.addr;

    auto target = [&](const std::string& s) -> int64_t {
        return static_cast<int64_t>(resolveLabel(s, pc, idx)) - static_cast<int64_t>(pc);
    };
    // CI-format immediate: bit 12 and bits 6:2.
    auto ci = [&](uint32_t funct3, uint32_t imm6, uint8_t rd, uint32_t quad) -> uint16_t {
        return static_cast<uint16_t>((funct3 << 13) | (((imm6 >> 5) & 1) << 12) |
                                     (uint32_t{rd} << 7) | ((imm6 & 0x1F) << 2) | quad);
    };

    if (m == "c.nop") { emit16(0x0001); return; }
    if (m == "c.ebreak") { emit16(0x9002); return; }

    if (m == "c.addi" || m == "c.addiw" || m == "c.li") {
        needOps(item, 2);
        int64_t imm = checkImm(parseInt(ops[1]), 6, "compressed");
        uint8_t rd = reg(ops[0]);
        if (m == "c.addiw" && rd == 0) fail("c.addiw needs rd != x0");
        uint32_t f3 = m == "c.addi" ? 0 : m == "c.addiw" ? 1 : 2;
        emit16(ci(f3, static_cast<uint32_t>(imm) & 0x3F, rd, 1));
        return;
    }
    if (m == "c.addi16sp") {
        needOps(item, 1);
        int64_t imm = parseInt(ops[0]);
        if (imm == 0 || imm % 16 || imm < -512 || imm > 496) fail("c.addi16sp immediate invalid");
        uint32_t i = static_cast<uint32_t>(imm);
        uint16_t h = static_cast<uint16_t>((3u << 13) | (((i >> 9) & 1) << 12) | (2u << 7) |
                                           (((i >> 4) & 1) << 6) | (((i >> 6) & 1) << 5) |
                                           (((i >> 7) & 3) << 3) | (((i >> 5) & 1) << 2) | 1u);
        emit16(h);
        return;
    }
    if (m == "c.lui") {
        needOps(item, 2);
        int64_t field = parseInt(ops[1]);  // same operand convention as lui
        uint8_t rd = reg(ops[0]);
        if (rd == 2) fail("c.lui cannot target sp");
        int64_t s = field >= 0x20 ? field - 0x100000 : field;  // 6-bit window of the 20-bit field
        if (s == 0 || s < -32 || s > 31) fail("c.lui immediate out of range");
        emit16(ci(3, static_cast<uint32_t>(s) & 0x3F, rd, 1));
        return;
    }
    if (m == "c.srli" || m == "c.srai" || m == "c.andi") {
        needOps(item, 2);
        uint8_t rd = cReg(ops[0]);
        int64_t imm = parseInt(ops[1]);
        uint32_t op2;
        if (m == "c.srli") op2 = 0;
        else if (m == "c.srai") op2 = 1;
        else op2 = 2;
        if (m == "c.andi") {
            checkImm(imm, 6, "c.andi");
        } else if (imm < 1 || imm > 63) {
            fail("compressed shift amount out of range");
        }
        uint32_t i = static_cast<uint32_t>(imm) & 0x3F;
        emit16(static_cast<uint16_t>((4u << 13) | (((i >> 5) & 1) << 12) | (op2 << 10) |
                                     (uint32_t{rd} << 7) | ((i & 0x1F) << 2) | 1u));
        return;
    }
    if (m == "c.sub" || m == "c.xor" || m == "c.or" || m == "c.and" || m == "c.subw" ||
        m == "c.addw") {
        needOps(item, 2);
        uint8_t rd = cReg(ops[0]);
        uint8_t rs2 = cReg(ops[1]);
        bool wide = m == "c.subw" || m == "c.addw";
        uint32_t sub = m == "c.sub" || m == "c.subw" ? 0
                       : m == "c.xor" || m == "c.addw" ? 1
                       : m == "c.or" ? 2 : 3;
        emit16(static_cast<uint16_t>((4u << 13) | ((wide ? 1u : 0u) << 12) | (3u << 10) |
                                     (uint32_t{rd} << 7) | (sub << 5) | (uint32_t{rs2} << 2) | 1u));
        return;
    }
    if (m == "c.j") {
        needOps(item, 1);
        int64_t off = target(ops[0]);
        if (off % 2) fail("jump target is misaligned");
        if (off < -2048 || off > 2046) throw BranchOutOfRange("c.j target out of range", line_);
        uint32_t i = static_cast<uint32_t>(off) & 0xFFF;
        uint16_t h = static_cast<uint16_t>(
            (5u << 13) | (((i >> 11) & 1) << 12) | (((i >> 4) & 1) << 11) |
            (((i >> 8) & 3) << 9) | (((i >> 10) & 1) << 8) | (((i >> 6) & 1) << 7) |
            (((i >> 7) & 1) << 6) | (((i >> 1) & 7) << 3) | (((i >> 5) & 1) << 2) | 1u);
        emit16(h);
        return;
    }
    if (m == "c.beqz" || m == "c.bnez") {
        needOps(item, 2);
        uint8_t rs1 = cReg(ops[0]);
        int64_t off = target(ops[1]);
        if (off % 2) fail("branch target is misaligned");
        if (off < -256 || off > 254)
            throw BranchOutOfRange(m + " target out of range", line_);
        uint32_t i = static_cast<uint32_t>(off) & 0x1FF;
        uint16_t h = static_cast<uint16_t>(
            ((m == "c.beqz" ? 6u : 7u) << 13) | (((i >> 8) & 1) << 12) | (((i >> 3) & 3) << 10) |
            (uint32_t{rs1} << 7) | (((i >> 6) & 3) << 5) | (((i >> 1) & 3) << 3) |
            (((i >> 5) & 1) << 2) | 1u);
        emit16(h);
        return;
    }
    if (m == "c.addi4spn") {
        needOps(item, 2);
        uint8_t rd = cReg(ops[0]);
        int64_t imm = parseInt(ops[1]);
        if (imm <= 0 || imm % 4 || imm > 1020) fail("c.addi4spn immediate invalid");
        uint32_t i = static_cast<uint32_t>(imm);
        emit16(static_cast<uint16_t>((((i >> 4) & 3) << 11) | (((i >> 6) & 0xF) << 7) |
                                     (((i >> 2) & 1) << 6) | (((i >> 3) & 1) << 5) |
                                     (uint32_t{rd} << 2)));
        return;
    }
    if (m == "c.lw" || m == "c.ld" || m == "c.sw" || m == "c.sd") {
        needOps(item, 2);
        uint8_t r = cReg(ops[0]);
        MemOperand mem = memOperand(ops[1]);
        uint8_t base = mem.base;
        if (base < 8 || base > 15) fail("base register must be x8..x15");
        uint8_t baseC = static_cast<uint8_t>(base - 8);
        bool word = m == "c.lw" || m == "c.sw";
        int64_t scale = word ? 4 : 8;
        int64_t maxOff = word ? 124 : 248;
        if (mem.offset < 0 || mem.offset % scale || mem.offset > maxOff)
            fail("compressed memory offset invalid");
        uint32_t i = static_cast<uint32_t>(mem.offset);
        uint32_t f3 = m == "c.lw" ? 2 : m == "c.ld" ? 3 : m == "c.sw" ? 6 : 7;
        uint32_t immBits;
        if (word)
            immBits = (((i >> 3) & 7) << 10) | (((i >> 2) & 1) << 6) | (((i >> 6) & 1) << 5);
        else
            immBits = (((i >> 3) & 7) << 10) | (((i >> 6) & 3) << 5);
        emit16(static_cast<uint16_t>((f3 << 13) | immBits | (uint32_t{baseC} << 7) |
                                     (uint32_t{r} << 2)));
        return;
    }
    if (m == "c.slli") {
        needOps(item, 2);
        uint8_t rd = reg(ops[0]);
        int64_t imm = parseInt(ops[1]);
        if (imm < 1 || imm > 63) fail("compressed shift amount out of range");
        emit16(static_cast<uint16_t>((0u << 13) | (((imm >> 5) & 1) << 12) | (uint32_t{rd} << 7) |
                                     ((imm & 0x1F) << 2) | 2u));
        return;
    }
    if (m == "c.lwsp" || m == "c.ldsp") {
        needOps(item, 2);
        uint8_t rd = reg(ops[0]);
        if (rd == 0) fail(m + " needs rd != x0");
        MemOperand mem = memOperand(ops[1]);
        if (mem.base != 2) fail(m + " base must be sp");
        bool word = m == "c.lwsp";
        int64_t scale = word ? 4 : 8;
        int64_t maxOff = word ? 252 : 504;
        if (mem.offset < 0 || mem.offset % scale || mem.offset > maxOff)
            fail("compressed memory offset invalid");
        uint32_t i = static_cast<uint32_t>(mem.offset);
        uint32_t immBits;
        if (word)
            immBits = (((i >> 5) & 1) << 12) | (((i >> 2) & 7) << 4) | (((i >> 6) & 3) << 2);
        else
            immBits = (((i >> 5) & 1) << 12) | (((i >> 3) & 3) << 5) | (((i >> 6) & 7) << 2);
        emit16(static_cast<uint16_t>(((word ? 2u : 3u) << 13) | immBits | (uint32_t{rd} << 7) | 2u));
        return;
    }
    if (m == "c.swsp" || m == "c.sdsp") {
        needOps(item, 2);
        uint8_t rs2 = reg(ops[0]);
        MemOperand mem = memOperand(ops[1]);
        if (mem.base != 2) fail(m + " base must be sp");
        bool word = m == "c.swsp";
        int64_t scale = word ? 4 : 8;
        int64_t maxOff = word ? 252 : 504;
        if (mem.offset < 0 || mem.offset % scale || mem.offset > maxOff)
            fail("compressed memory offset invalid");
        uint32_t i = static_cast<uint32_t>(mem.offset);
        uint32_t immBits;
        if (word)
            immBits = (((i >> 2) & 0xF) << 9) | (((i >> 6) & 3) << 7);
        else
            immBits = (((i >> 3) & 7) << 10) | (((i >> 6) & 7) << 7);
        emit16(static_cast<uint16_t>(((word ? 6u : 7u) << 13) | immBits | (uint32_t{rs2} << 2) | 2u));
        return;
    }
    if (m == "c.jr" || m == "c.jalr") {
        needOps(item, 1);
        uint8_t rs1 = reg(ops[0]);
        if (rs1 == 0) fail(m + " needs rs1 != x0");
        emit16(static_cast<uint16_t>((4u << 13) | ((m == "c.jalr" ? 1u : 0u) << 12) |
                                     (uint32_t{rs1} << 7) | 2u));
        return;
    }
    if (m == "c.mv" || m == "c.add") {
        needOps(item, 2);
        uint8_t rd = reg(ops[0]);
        uint8_t rs2 = reg(ops[1]);
        if (rs2 == 0) fail(m + " needs rs2 != x0");
        emit16(static_cast<uint16_t>((4u << 13) | ((m == "c.add" ? 1u : 0u) << 12) |
                                     (uint32_t{rd} << 7) | (uint32_t{rs2} << 2) | 2u));
        return;
    }

    throw UnknownMnemonic("unknown mnemonic '" + m + "'", line_);
}

}  // namespace

AsmError::AsmError(const std::string& what, size_t line)
    : std::runtime_error("line " + std::to_string(line) + ": " + what), line_(line) {}

UnknownFixture::UnknownFixture(const std::string& name)
    : std::runtime_error("unknown fixture '" + name + "'") {}

AsmProgram assembleProgram(std::string_view source) {
    return Assembler{}.run(source);
}

std::vector<uint8_t> assemble(std::string_view source) {
    return emitElf(assembleProgram(source));
}

namespace {

class ElfBuilder {
public:
    std::vector<uint8_t>& out() { return bytes_; }

    void u8(uint8_t v) { bytes_.push_back(v); }
    void u16(uint16_t v) { put(v, 2); }
    void u32(uint32_t v) { put(v, 4); }
    void u64(uint64_t v) { put(v, 8); }
    void raw(std::span<const uint8_t> data) { bytes_.insert(bytes_.end(), data.begin(), data.end()); }
    void padTo(size_t offset) { bytes_.resize(offset, 0); }
    size_t size() const { return bytes_.size(); }

private:
    void put(uint64_t v, unsigned width) {
        for (unsigned i = 0; i < width; ++i) bytes_.push_back(static_cast<uint8_t>(v >> (8 * i)));
    }

    std::vector<uint8_t> bytes_;
};

}  // namespace

std::vector<uint8_t> emitElf(const AsmProgram& program) {
    const bool hasData = !program.data.empty();
    const uint16_t phnum = hasData ? 2 : 1;

    // File layout: ehdr, phdrs, text at 0x1000, data on the next page
    // boundary (offsets stay congruent to vaddrs mod page size), then the
    // symbol tables and section headers.
    const uint64_t textOff = 0x1000;
    const uint64_t dataOff = alignUp(textOff + program.text.size(), kPage);

    std::string strtab(1, '\0');
    struct Sym {
        uint32_t nameOff;
        uint8_t info;
        uint16_t shndx;
        uint64_t value;
    };
    std::vector<Sym> symbols;
    std::set<std::string> exported(program.exported.begin(), program.exported.end());

    auto addSym = [&](const std::string& name, uint64_t value, bool global) {
        uint32_t nameOff = static_cast<uint32_t>(strtab.size());
        strtab += name;
        strtab += '\0';
        bool inText = value >= program.textBase && value < program.dataBase;
        // STT_FUNC in text, STT_OBJECT in data; binding in the high nibble.
        uint8_t type = inText ? 2 : 1;
        uint8_t bind = global ? 1 : 0;
        symbols.push_back({nameOff, static_cast<uint8_t>((bind << 4) | type),
                           static_cast<uint16_t>(inText ? 1 : 2), value});
    };

    for (const auto& [name, value] : program.labels)
        if (!exported.count(name)) addSym(name, value, false);
    size_t firstGlobal = symbols.size() + 1;  // +1 for the null entry
    for (const auto& [name, value] : program.labels)
        if (exported.count(name)) addSym(name, value, true);

    const uint64_t symtabOff = alignUp(dataOff + program.data.size(), 8);
    const uint64_t symtabSize = (symbols.size() + 1) * 24;
    const uint64_t strtabOff = symtabOff + symtabSize;
    const std::string shstrtab = std::string("\0.text\0.data\0.symtab\0.strtab\0.shstrtab\0", 41);
    const uint64_t shstrtabOff = strtabOff + strtab.size();
    const uint64_t shoff = alignUp(shstrtabOff + shstrtab.size(), 8);

    ElfBuilder b;
    // ELF header.
    const uint8_t ident[16] = {0x7F, 'E', 'L', 'F', 2, 1, 1, 0, 0, 0, 0, 0, 0, 0, 0, 0};
    b.raw(ident);
    b.u16(2);    // ET_EXEC
    b.u16(243);  // EM_RISCV
    b.u32(1);
    b.u64(program.entry);
    b.u64(64);     // phoff
    b.u64(shoff);  // shoff
    b.u32(0x5);    // e_flags: RVC, double-float ABI convention
    b.u16(64);
    b.u16(56);
    b.u16(phnum);
    b.u16(64);
    b.u16(6);  // shnum
    b.u16(5);  // shstrndx

    // Program headers.
    auto phdr = [&](uint64_t off, uint64_t vaddr, uint64_t filesz, uint32_t flags) {
        b.u32(1);  // PT_LOAD
        b.u32(flags);
        b.u64(off);
        b.u64(vaddr);
        b.u64(vaddr);
        b.u64(filesz);
        b.u64(filesz);  // memsz == filesz; uninitialized data uses .zero
        b.u64(kPage);
    };
    phdr(textOff, program.textBase, program.text.size(), 0x5);  // R+X
    if (hasData) phdr(dataOff, program.dataBase, program.data.size(), 0x6);  // R+W

    b.padTo(textOff);
    b.raw(program.text);
    if (hasData) {
        b.padTo(dataOff);
        b.raw(program.data);
    }

    b.padTo(symtabOff);
    // Null symbol, then locals, then globals.
    for (int i = 0; i < 24; ++i) b.u8(0);
    for (const Sym& s : symbols) {
        b.u32(s.nameOff);
        b.u8(s.info);
        b.u8(0);
        b.u16(s.shndx);
        b.u64(s.value);
        b.u64(0);
    }
    b.raw(std::span(reinterpret_cast<const uint8_t*>(strtab.data()), strtab.size()));
    b.raw(std::span(reinterpret_cast<const uint8_t*>(shstrtab.data()), shstrtab.size()));

    b.padTo(shoff);
    auto shdr = [&](uint32_t name, uint32_t type, uint64_t flags, uint64_t addr, uint64_t off,
                    uint64_t size, uint32_t link, uint32_t info, uint64_t align, uint64_t entsize) {
        b.u32(name);
        b.u32(type);
        b.u64(flags);
        b.u64(addr);
        b.u64(off);
        b.u64(size);
        b.u32(link);
        b.u32(info);
        b.u64(align);
        b.u64(entsize);
    };
    shdr(0, 0, 0, 0, 0, 0, 0, 0, 0, 0);
    shdr(1, 1, 0x6, program.textBase, textOff, program.text.size(), 0, 0, 4, 0);   // .text
    shdr(7, 1, 0x3, program.dataBase, dataOff, program.data.size(), 0, 0, 8, 0);   // .data
    shdr(13, 2, 0, 0, symtabOff, symtabSize, 4, static_cast<uint32_t>(firstGlobal), 8, 24);
    shdr(21, 3, 0, 0, strtabOff, strtab.size(), 0, 0, 1, 0);
    shdr(29, 3, 0, 0, shstrtabOff, shstrtab.size(), 0, 0, 1, 0);

    return std::move(b.out());
}

}  // namespace ctrv::guestkit
