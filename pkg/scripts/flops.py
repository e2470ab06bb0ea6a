"""Print generator FLOP counts for a few montage sizes."""
from freqmask.evaluate import generator_flops

if __name__ == "__main__":
    print("channels,bins,two_branch,two_branch_per_channel,gru")
    for ch in (4, 8, 32, 62):
        f = generator_flops(ch, 400)
        print(f"{ch},400,{f.two_branch},{f.two_branch_per_channel},{f.gru}")
