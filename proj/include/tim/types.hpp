#pragma once

#include <string>
#include <vector>

namespace tim {

using TokenSeq = std::vector<int>;

// (instruction, answer, binary label); element of the detection dataset and
// of both replay memories.
struct MemoryEntry {
    TokenSeq instruction;
    TokenSeq answer;
    int label = 0;  // 0 = not jailbroken, 1 = jailbroken
    int part = 0;   // detection-dataset part 1..4, 0 elsewhere
};

// One test-stream instruction. Truth flags are metric-side only and never
// visible to the model.
struct StreamEvent {
    TokenSeq instruction;
    bool truth_is_attack = false;
    std::string family = "clean";
};

}  // namespace tim
